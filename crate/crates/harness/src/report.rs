//! Summary tables and plot data from sweep `cells.csv` files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nvcim_core::swim::Strategy;

use crate::sweep::CELLS_HEADER;
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub strategy: Strategy,
    pub sigma: f64,
    pub nwc_target: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub fn parse_cells(path: &str, text: &str) -> Result<Vec<CellRow>, Error> {
    let schema = |reason: String| Error::Schema {
        path: path.to_string(),
        reason,
    };
    let mut lines = text.lines();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) if h.trim() == CELLS_HEADER => {}
        Some(h) => return Err(schema(format!("unexpected header `{h}`"))),
    }
    let columns = CELLS_HEADER.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != columns {
            return Err(schema(format!(
                "line {}: {} fields, expected {columns}",
                i + 2,
                f.len()
            )));
        }
        let bad = |what: &str| schema(format!("line {}: bad {what}", i + 2));
        rows.push(CellRow {
            strategy: f[0].parse().map_err(|_| bad("strategy"))?,
            sigma: f[1].parse().map_err(|_| bad("sigma"))?,
            nwc_target: f[2].parse().map_err(|_| bad("nwc_target"))?,
            mean: f[3].parse().map_err(|_| bad("mean"))?,
            std: f[4].parse().map_err(|_| bad("std"))?,
            runs: f[5].parse().map_err(|_| bad("runs"))?,
        });
    }
    Ok(rows)
}

fn strategy_rank(s: Strategy) -> usize {
    Strategy::ALL.iter().position(|&x| x == s).expect("known strategy")
}

/// Sorts rows into σ-then-strategy order, NWC ascending within a strategy.
pub fn sort_rows(rows: &mut [CellRow]) {
    rows.sort_by(|a, b| {
        a.sigma
            .total_cmp(&b.sigma)
            .then(strategy_rank(a.strategy).cmp(&strategy_rank(b.strategy)))
            .then(a.nwc_target.total_cmp(&b.nwc_target))
    });
}

fn distinct(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

/// One block per σ, one row per strategy, one column per NWC target.
/// Entries are test accuracy in percent as `mean ± std`.
pub fn table(rows: &[CellRow]) -> String {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let nwcs = distinct(rows.iter().map(|r| r.nwc_target).collect());
    let mut s = String::new();
    let mut header = format!("{:>6}  {:<11}", "sigma", "method");
    for n in &nwcs {
        write!(header, " {:>15}", format!("NWC={n}")).expect("string write");
    }
    s.push_str(header.trim_end());
    s.push('\n');
    for sigma in distinct(rows.iter().map(|r| r.sigma).collect()) {
        writeln!(s, "{}", "-".repeat(header.trim_end().len())).expect("string write");
        for st in Strategy::ALL {
            let mine: Vec<&CellRow> = rows
                .iter()
                .filter(|r| r.sigma == sigma && r.strategy == st)
                .collect();
            if mine.is_empty() {
                continue;
            }
            let mut line = format!("{sigma:>6}  {:<11}", st.name());
            for n in &nwcs {
                let cell = mine
                    .iter()
                    .find(|r| r.nwc_target == *n)
                    .map(|r| format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std))
                    .unwrap_or_default();
                write!(line, " {cell:>15}").expect("string write");
            }
            s.push_str(line.trim_end());
            s.push('\n');
        }
    }
    s
}

/// Accuracy-vs-NWC curves: `(file name, "nwc mean std" lines)` per
/// (σ, strategy), for the write-verify strategies and in-situ training.
pub fn plot_data(rows: &[CellRow]) -> Vec<(String, String)> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut out = Vec::new();
    for sigma in distinct(rows.iter().map(|r| r.sigma).collect()) {
        for st in Strategy::ALL {
            let mut body = String::new();
            for r in rows.iter().filter(|r| r.sigma == sigma && r.strategy == st) {
                writeln!(body, "{} {} {}", r.nwc_target, r.mean, r.std).expect("string write");
            }
            if !body.is_empty() {
                out.push((format!("curve_sigma{sigma}_{}.dat", st.name()), body));
            }
        }
    }
    out
}

/// Reads every input, writes `table.txt` and the curve files into `out`,
/// and returns the table text.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<String, Error> {
    let mut rows = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p)?;
        rows.extend(parse_cells(&p.display().to_string(), &text)?);
    }
    let t = table(&rows);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("table.txt"), &t)?;
    for (name, body) in plot_data(&rows) {
        std::fs::write(out.join(name), body)?;
    }
    Ok(t)
}
