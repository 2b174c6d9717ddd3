//! CSV interchange with fixed `%.12e` float formatting.
//!
//! Every table carries a header row. Floats are written as
//! `d.dddddddddddde±XX` so reruns are byte-identical and the files parse with
//! any C-style reader.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// `%.12e` in the C sense: twelve mantissa digits, signed two-digit exponent.
pub fn sci(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:.12e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) => sci(*x),
            Cell::Int(k) => k.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(k: usize) -> Self {
        Cell::Int(k as i64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_owned())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

/// A header plus rows of cells, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(headers: &[S]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.as_ref().to_owned()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.headers.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.headers)?;
        for row in &self.rows {
            out.write_record(row.iter().map(Cell::render))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 csv")
    }
}

/// Column-addressable view of a CSV file read back in.
#[derive(Debug, Clone)]
pub struct ReadTable {
    index: HashMap<String, usize>,
    rows: Vec<Vec<String>>,
}

impl ReadTable {
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let index = rdr
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_owned(), i))
            .collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_owned).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { index, rows })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("missing column '{name}'")))
    }

    pub fn text(&self, name: &str) -> Result<Vec<String>> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[i].clone()).collect())
    }

    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(k, r)| {
                r[i].trim().parse::<f64>().map_err(|_| {
                    Error::Protocol(format!("row {k}: column '{name}' is not a number: '{}'", r[i]))
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c_style_exponent() {
        assert_eq!(sci(1.0), "1.000000000000e+00");
        assert_eq!(sci(-0.00123), "-1.230000000000e-03");
        assert_eq!(sci(6.02214076e23), "6.022140760000e+23");
        assert_eq!(sci(1e-300), "1.000000000000e-300");
        assert_eq!(sci(0.0), "0.000000000000e+00");
    }

    #[test]
    fn round_trip_through_csv() {
        let mut t = Table::new(&["k", "delta", "branch"]);
        t.push(vec![0usize.into(), (-21.75).into(), "forward".into()]);
        t.push(vec![1usize.into(), (1.0 / 3.0).into(), "backward".into()]);
        let s = t.to_csv_string();
        assert!(s.starts_with("k,delta,branch\n0,-2.175000000000e+01,forward\n"));
        let back = ReadTable::from_reader(s.as_bytes()).unwrap();
        let d = back.numbers("delta").unwrap();
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(back.text("branch").unwrap()[1], "backward");
        assert!(matches!(back.numbers("gamma"), Err(Error::Protocol(_))));
    }

    #[test]
    fn identical_tables_identical_bytes() {
        let build = || {
            let mut t = Table::new(&["x"]);
            for i in 0..50 {
                t.push(vec![(i as f64).sin().into()]);
            }
            t.to_csv_string()
        };
        assert_eq!(build(), build());
    }
}
