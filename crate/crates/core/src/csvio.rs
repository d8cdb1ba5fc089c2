//! Time-series CSV files.
//!
//! Samples are written with 17 significant digits so that parsing a file gives back
//! the exact binary values. Run metadata (verdict, parameter hash, the resolved
//! configuration) follows the data as `#` comment lines.

use std::fmt::Write as _;

use crate::engine::{channels, SimResult};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    /// Column names, `t` first.
    pub header: Vec<String>,
    /// `columns[j][i]` is sample `i` of column `j`.
    pub columns: Vec<Vec<f64>>,
    /// Comment lines without the leading `# `.
    pub footer: Vec<String>,
}

/// Column names of the per-run CSV for the given reported buses.
pub fn csv_header(record_buses: &[u32]) -> Vec<String> {
    let mut h: Vec<String> = [
        "t",
        channels::GEN_P,
        channels::GEN_Q,
        channels::GEN_SPEED,
        channels::GEN_TORQUE,
        channels::PV_P,
        channels::PV_Q,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for &b in record_buses {
        h.push(channels::bus_p(b));
        h.push(channels::bus_q(b));
    }
    h.push(channels::GRID_P.to_string());
    h
}

impl TimeSeries {
    pub fn from_result(result: &SimResult, record_buses: &[u32], footer: Vec<String>) -> Result<Self> {
        let header = csv_header(record_buses);
        let mut columns = vec![result.time.clone()];
        for name in &header[1..] {
            columns.push(result.require(name)?.to_vec());
        }
        Ok(TimeSeries {
            header,
            columns,
            footer,
        })
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.header
            .iter()
            .position(|h| h == name)
            .map(|j| self.columns[j].as_slice())
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a `key: value` footer line.
    pub fn footer_value(&self, key: &str) -> Option<&str> {
        self.footer.iter().find_map(|l| {
            l.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(':'))
                .map(str::trim)
        })
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            for (j, col) in self.columns.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:.16e}", col[i]);
            }
            out.push('\n');
        }
        for line in &self.footer {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let header: Vec<String> = match lines.next() {
            Some((_, h)) if !h.trim().is_empty() => h.split(',').map(|s| s.trim().to_string()).collect(),
            _ => {
                return Err(Error::Csv {
                    row: 1,
                    message: "missing header".into(),
                })
            }
        };
        if header[0] != "t" {
            return Err(Error::Csv {
                row: 1,
                message: "first column must be `t`".into(),
            });
        }
        let mut columns = vec![Vec::new(); header.len()];
        let mut footer = Vec::new();
        for (i, line) in lines {
            let row = i + 1;
            if let Some(c) = line.strip_prefix('#') {
                footer.push(c.strip_prefix(' ').unwrap_or(c).to_string());
                continue;
            }
            if !footer.is_empty() {
                return Err(Error::Csv {
                    row,
                    message: "data after the comment footer".into(),
                });
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(Error::Csv {
                    row,
                    message: format!("expected {} fields, found {}", header.len(), fields.len()),
                });
            }
            for (j, f) in fields.iter().enumerate() {
                let v: f64 = f.trim().parse().map_err(|_| Error::Csv {
                    row,
                    message: format!("non-numeric value `{f}` in column `{}`", header[j]),
                })?;
                columns[j].push(v);
            }
        }
        Ok(TimeSeries {
            header,
            columns,
            footer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TimeSeries {
        let header = csv_header(&[104]);
        let n = header.len();
        let columns = (0..n)
            .map(|j| (0..5).map(|i| (i as f64 * 0.1 + j as f64).sin() / 3.0).collect())
            .collect();
        TimeSeries {
            header,
            columns,
            footer: vec!["verdict: STABLE".into(), "parameter_hash: abcd".into()],
        }
    }

    #[test]
    fn header_layout() {
        assert_eq!(
            csv_header(&[104]).join(","),
            "t,gen_p_mw,gen_q_mvar,gen_speed_pu,gen_torque_pu,pv_p_mw,pv_q_mvar,bus104_p_mw,bus104_q_mvar,grid_p_mw"
        );
    }

    #[test]
    fn bit_exact_round_trip() {
        let mut ts = sample();
        ts.columns[1][2] = -0.0;
        ts.columns[2][3] = f64::MIN_POSITIVE;
        ts.columns[3][4] = 1.0 / 3.0 * 1e300;
        let text = ts.render();
        let back = TimeSeries::parse(&text).unwrap();
        assert_eq!(back.header, ts.header);
        assert_eq!(back.footer, ts.footer);
        for (a, b) in back.columns.iter().zip(&ts.columns) {
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.render(), text);
        assert_eq!(back.footer_value("verdict"), Some("STABLE"));
    }

    #[test]
    fn non_numeric_cell_names_row() {
        let mut text = sample().render();
        text = text.replacen("e-1,", "e-1x,", 1);
        let row = text.lines().position(|l| l.contains("e-1x")).unwrap() + 1;
        match TimeSeries::parse(&text) {
            Err(Error::Csv { row: r, .. }) => assert_eq!(r, row),
            other => panic!("{other:?}"),
        }
        assert!(matches!(TimeSeries::parse(""), Err(Error::Csv { row: 1, .. })));
        assert!(matches!(
            TimeSeries::parse("t,a\n1,2,3\n"),
            Err(Error::Csv { row: 2, .. })
        ));
    }
}
