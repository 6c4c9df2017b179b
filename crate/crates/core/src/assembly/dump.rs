//! Plain-text dump of assembled blocks.

use std::fmt::Write;

use nalgebra::{DMatrix, DVector};

use super::LinearFbSystem;

fn section(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "## {name} {} {}", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
}

fn vector(out: &mut String, name: &str, v: &DVector<f64>) {
    section(out, name, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
}

/// Writes every block of `sys` on `cell`, one section per block headed by
/// `## name rows cols` followed by the rows.
pub fn dump(sys: &LinearFbSystem, cell: usize) -> String {
    let mut out = String::new();
    let c = sys.at_cell(cell);
    section(&mut out, "x_drift", &c.x_drift);
    section(&mut out, "x_from_y", &c.x_from_y);
    section(&mut out, "x_from_z", &c.x_from_z);
    section(&mut out, "y_drift", &c.y_drift);
    section(&mut out, "y_from_x", &c.y_from_x);
    section(&mut out, "y_from_z", &c.y_from_z);
    section(&mut out, "diff_from_x", &c.diff_from_x);
    section(&mut out, "diff_from_y", &c.diff_from_y);
    section(&mut out, "diff_from_z", &c.diff_from_z);
    vector(&mut out, "diffusion_offset", &c.diffusion_offset);
    section(&mut out, "initial_coupling", &sys.initial_coupling);
    section(&mut out, "terminal_coupling", &sys.terminal_coupling);
    section(&mut out, "martingale_embed", &sys.martingale_embed);
    section(&mut out, "terminal_inverse", &sys.terminal_inverse);
    vector(&mut out, "initial_offset", &sys.initial_offset);
    vector(&mut out, "terminal_offset", &sys.terminal_offset);
    out
}
