//! Per-run results, their summary statistics and the text table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::reduce::mean_and_se;

use super::CellKey;

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub mean: f64,
    /// Sample standard deviation over runs divided by the square root of the run count.
    pub se: f64,
    pub values: Vec<f64>,
}

/// NDCG@10 per `(cell, run)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsGrid {
    pub runs: BTreeMap<CellKey, BTreeMap<usize, f64>>,
}

impl ResultsGrid {
    pub fn insert(&mut self, cell: CellKey, run: usize, value: f64) {
        self.runs.entry(cell).or_default().insert(run, value);
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn stats(&self, cell: &CellKey) -> Option<CellStats> {
        let values: Vec<f64> = self.runs.get(cell)?.values().copied().collect();
        if values.is_empty() {
            return None;
        }
        let (mean, se) = mean_and_se(&values);
        Some(CellStats { mean, se, values })
    }

    pub fn merge(&mut self, other: ResultsGrid) {
        for (cell, runs) in other.runs {
            self.runs.entry(cell).or_default().extend(runs);
        }
    }
}

/// `mean (se)` with three decimals.
pub fn format_cell(mean: f64, se: f64) -> String {
    format!("{mean:.3} ({se:.3})")
}

pub fn write_grid_csv(grid: &ResultsGrid, mut w: impl Write) -> Result<()> {
    let io = |e| Error::io("grid.csv", e);
    writeln!(w, "regime,K2,N,run,ndcg10").map_err(io)?;
    for (cell, runs) in &grid.runs {
        for (run, v) in runs {
            writeln!(w, "{},{},{},{},{}", cell.regime, cell.k2, cell.n, run, v).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_grid_csv(r: impl BufRead) -> Result<ResultsGrid> {
    let mut grid = ResultsGrid::default();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("grid.csv", e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse_err = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        if f.len() != 5 {
            return Err(parse_err("expected regime,K2,N,run,ndcg10"));
        }
        let cell = CellKey {
            regime: f[0].parse().map_err(|_| parse_err("regime"))?,
            k2: f[1].parse().map_err(|_| parse_err("K2"))?,
            n: f[2].parse().map_err(|_| parse_err("N"))?,
        };
        let run = f[3].parse().map_err(|_| parse_err("run"))?;
        let v = f[4].parse().map_err(|_| parse_err("ndcg10"))?;
        grid.insert(cell, run, v);
    }
    Ok(grid)
}

/// Rows are regimes, column groups are `K2`, sub-columns are `N`. The best
/// displayed mean of each column is wrapped in `**`, ties included. Also
/// returns the summary as CSV (`regime,K2,N,mean,se,n_runs`).
pub fn render_table(grid: &ResultsGrid) -> (String, String) {
    let regimes: BTreeSet<_> = grid.runs.keys().map(|c| c.regime).collect();
    let k2s: BTreeSet<usize> = grid.runs.keys().map(|c| c.k2).collect();
    let ns: BTreeSet<usize> = grid.runs.keys().map(|c| c.n).collect();
    let columns: Vec<(usize, usize)> = k2s
        .iter()
        .flat_map(|&k2| ns.iter().map(move |&n| (k2, n)))
        .collect();

    // best rounded mean per column, in thousandths
    let rounded = |m: f64| (m * 1000.0).round() as i64;
    let mut best: BTreeMap<(usize, usize), i64> = BTreeMap::new();
    for (cell, _) in &grid.runs {
        if let Some(s) = grid.stats(cell) {
            let e = best.entry((cell.k2, cell.n)).or_insert(i64::MIN);
            *e = (*e).max(rounded(s.mean));
        }
    }

    let width = 19;
    let first = 13;
    let mut text = String::from("NDCG@10, mean (standard error) over runs\n");
    let mut line = format!("{:<first$}", "");
    for &k2 in &k2s {
        let group = width * ns.len();
        line.push_str(&format!("{:<group$}", format!("K2={k2}")));
    }
    text.push_str(line.trim_end());
    text.push('\n');
    let mut line = format!("{:<first$}", "method");
    for &(_, n) in &columns {
        line.push_str(&format!("{:<width$}", format!("N={n}")));
    }
    text.push_str(line.trim_end());
    text.push('\n');

    let mut csv = String::from("regime,K2,N,mean,se,n_runs\n");
    for regime in &regimes {
        let mut line = format!("{:<first$}", regime.name());
        for &(k2, n) in &columns {
            let cell = CellKey {
                regime: *regime,
                k2,
                n,
            };
            let entry = match grid.stats(&cell) {
                Some(s) => {
                    csv.push_str(&format!(
                        "{},{},{},{:.6},{:.6},{}\n",
                        regime,
                        k2,
                        n,
                        s.mean,
                        s.se,
                        s.values.len()
                    ));
                    let f = format_cell(s.mean, s.se);
                    if best.get(&(k2, n)) == Some(&rounded(s.mean)) {
                        format!("**{f}**")
                    } else {
                        f
                    }
                }
                None => "-".to_string(),
            };
            line.push_str(&format!("{entry:<width$}"));
        }
        text.push_str(line.trim_end());
        text.push('\n');
    }
    (text, csv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Regime;

    fn key(regime: Regime, k2: usize, n: usize) -> CellKey {
        CellKey { regime, k2, n }
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(format_cell(0.50399, 0.0012), "0.504 (0.001)");
    }

    #[test]
    fn empty_grid_is_header_only() {
        let (text, csv) = render_table(&ResultsGrid::default());
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().starts_with("method"));
        assert_eq!(csv, "regime,K2,N,mean,se,n_runs\n");
    }

    #[test]
    fn ties_are_all_bold() {
        let mut g = ResultsGrid::default();
        g.insert(key(Regime::Baseline, 10, 100), 0, 0.5001);
        g.insert(key(Regime::Independent, 10, 100), 0, 0.4998);
        g.insert(key(Regime::Joint, 10, 100), 0, 0.41);
        let (text, _) = render_table(&g);
        assert_eq!(text.matches("**").count(), 4, "{text}");
        assert!(!text.lines().last().unwrap().contains("**"));
    }

    #[test]
    fn stats_and_csv_round_trip() {
        let mut g = ResultsGrid::default();
        for (r, v) in [0.1, 0.2, 0.6].iter().enumerate() {
            g.insert(key(Regime::Joint, 5, 50), r, *v);
        }
        let s = g.stats(&key(Regime::Joint, 5, 50)).unwrap();
        assert!((s.mean - 0.3).abs() < 1e-15);
        // sample sd of {0.1, 0.2, 0.6} is sqrt(0.07)
        assert!((s.se - (0.07f64).sqrt() / 3f64.sqrt()).abs() < 1e-12);
        let mut buf = Vec::new();
        write_grid_csv(&g, &mut buf).unwrap();
        assert_eq!(read_grid_csv(&buf[..]).unwrap(), g);
    }
}
