//! Pairwise latency between physical sites.
//!
//! A matrix holds round-trip times between sites; hosts are placed on sites
//! and a message between two hosts takes half the round trip of their sites.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sim::kernel::Time;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyMatrix {
    n_sites: usize,
    rtt: Vec<u32>,
}

impl LatencyMatrix {
    /// Builds a matrix from rows of round-trip times in milliseconds.
    pub fn from_rows(rows: Vec<Vec<u32>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::LatencyParse("matrix has no sites".into()));
        }
        let mut rtt = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::LatencyParse(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            rtt.extend(row);
        }
        let mut m = Self { n_sites: n, rtt };
        for i in 0..n {
            m.rtt[i * n + i] = 0;
        }
        Ok(m)
    }

    /// All off-diagonal entries equal `rtt_ms`.
    pub fn uniform(n_sites: usize, rtt_ms: u32) -> Self {
        synthetic_latency(n_sites, rtt_ms, rtt_ms, 0).expect("valid bounds")
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn rtt(&self, from_site: usize, to_site: usize) -> Time {
        self.rtt[from_site * self.n_sites + to_site] as Time
    }

    /// One-way latency: half the round trip, rounded down.
    pub fn one_way(&self, from_site: usize, to_site: usize) -> Time {
        self.rtt(from_site, to_site) / 2
    }

    pub fn mean_rtt(&self) -> f64 {
        if self.n_sites < 2 {
            return 0.0;
        }
        let sum: u64 = self.rtt.iter().map(|&v| v as u64).sum();
        sum as f64 / (self.n_sites * (self.n_sites - 1)) as f64
    }

    /// Parses the plain-text format: a site count line followed by one
    /// whitespace-separated row of non-negative integers per site.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::LatencyParse("empty input".into()))?;
        let n: usize = header
            .parse()
            .map_err(|_| Error::LatencyParse(format!("bad site count {header:?}")))?;
        let mut rows = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            if i >= n {
                return Err(Error::LatencyParse(format!("more than {n} rows")));
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|_| {
                        Error::LatencyParse(format!("row {i}: invalid value {tok:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.len() != n {
            return Err(Error::LatencyParse(format!(
                "expected {n} rows, found {}",
                rows.len()
            )));
        }
        Self::from_rows(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n_sites);
        for i in 0..self.n_sites {
            let row: Vec<String> = (0..self.n_sites).map(|j| self.rtt(i, j).to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Uniform seeded round-trip times in `[min_ms, max_ms]` with a zero diagonal.
pub fn synthetic_latency(n_sites: usize, min_ms: u32, max_ms: u32, seed: u64) -> Result<LatencyMatrix> {
    if min_ms > max_ms {
        return Err(Error::LatencyParse(format!(
            "synthetic bounds inverted: {min_ms} > {max_ms}"
        )));
    }
    let n = n_sites.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rtt = vec![0u32; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                rtt[i * n + j] = rng.gen_range(min_ms..=max_ms);
            }
        }
    }
    Ok(LatencyMatrix { n_sites: n, rtt })
}

/// Places `count` hosts on sites uniformly at random, reusing sites.
pub fn assign_sites(count: usize, n_sites: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5173_5173);
    (0..count).map(|_| rng.gen_range(0..n_sites.max(1))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_constant_bounds() {
        let m = synthetic_latency(4, 100, 100, 9).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.rtt(i, j), if i == j { 0 } else { 100 });
            }
        }
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synthetic_latency(16, 10, 300, 7).unwrap();
        let b = synthetic_latency(16, 10, 300, 7).unwrap();
        let c = synthetic_latency(16, 10, 300, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((0..16).all(|i| a.rtt(i, i) == 0));
    }

    #[test]
    fn one_way_is_half_rtt() {
        let m = LatencyMatrix::from_rows(vec![vec![0, 100], vec![100, 0]]).unwrap();
        assert_eq!(m.one_way(0, 1), 50);
        assert_eq!(m.one_way(1, 1), 0);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let m = synthetic_latency(5, 1, 400, 3).unwrap();
        assert_eq!(LatencyMatrix::parse(&m.to_text()).unwrap(), m);
        assert!(LatencyMatrix::parse("2\n0 1\n1\n").is_err(), "ragged row");
        assert!(LatencyMatrix::parse("2\n0 -1\n1 0\n").is_err(), "negative");
        assert!(LatencyMatrix::parse("3\n0 1 1\n1 0 1\n").is_err(), "missing row");
        assert!(LatencyMatrix::parse("").is_err());
        assert!(LatencyMatrix::parse("x\n").is_err());
    }

    #[test]
    fn asymmetric_matrix_taken_as_given() {
        let m = LatencyMatrix::parse("2\n0 80\n120 0\n").unwrap();
        assert_eq!(m.rtt(0, 1), 80);
        assert_eq!(m.rtt(1, 0), 120);
    }

    #[test]
    fn site_assignment_reuses_sites() {
        let sites = assign_sites(100, 4, 1);
        assert_eq!(sites.len(), 100);
        assert!(sites.iter().all(|&s| s < 4));
        assert_eq!(sites, assign_sites(100, 4, 1));
    }
}
