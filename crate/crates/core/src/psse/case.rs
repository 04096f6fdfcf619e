//! MATPOWER case files: the `mpc.baseMVA`, `mpc.bus`, `mpc.gen` and
//! `mpc.branch` subset, plus a canonical serializer.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::psse::grid::{Branch, Bus, BusType, Generator, GridModel};

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 10;
const BRANCH_COLS: usize = 11;

struct Table {
    /// `(line number, values)` per row.
    rows: Vec<(usize, Vec<f64>)>,
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_numbers(text: &str, line: usize) -> Result<Vec<f64>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_error(line, format!("not a number: '{t}'")))
        })
        .collect()
}

/// Split the text into scalar assignments and matrix tables keyed by field.
fn scan(text: &str) -> Result<(HashMap<String, (usize, String)>, HashMap<String, Table>)> {
    let mut scalars = HashMap::new();
    let mut tables = HashMap::new();
    let mut open: Option<(String, Table, Vec<f64>, usize)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let mut body = line;
        if open.is_none() {
            if let Some(rest) = line.strip_prefix("mpc.") {
                let (name, value) = rest
                    .split_once('=')
                    .ok_or_else(|| parse_error(line_no, "expected 'mpc.<field> = ...'"))?;
                let name = name.trim().to_string();
                let value = value.trim();
                if let Some(after) = value.strip_prefix('[') {
                    open = Some((name, Table { rows: Vec::new() }, Vec::new(), line_no));
                    body = after;
                } else {
                    let value = value
                        .trim_end_matches(';')
                        .trim()
                        .trim_matches('\'')
                        .to_string();
                    scalars.insert(name, (line_no, value));
                    continue;
                }
            } else {
                // function header and other statements outside tables
                continue;
            }
        }
        let (_, table, pending, _) = open.as_mut().expect("inside a table");
        let (content, closes) = match body.find(']') {
            Some(i) => (&body[..i], true),
            None => (body, false),
        };
        for (j, chunk) in content.split(';').enumerate() {
            if j > 0 && !pending.is_empty() {
                table.rows.push((line_no, std::mem::take(pending)));
            }
            pending.extend(parse_numbers(chunk, line_no)?);
        }
        // a newline also ends a row
        if !pending.is_empty() {
            table.rows.push((line_no, std::mem::take(pending)));
        }
        if closes {
            let (name, table, _, _) = open.take().expect("inside a table");
            tables.insert(name, table);
        }
    }
    if let Some((name, _, _, start)) = open {
        return Err(parse_error(
            start,
            format!("table mpc.{name} is never closed"),
        ));
    }
    Ok((scalars, tables))
}

fn require_cols(row: &(usize, Vec<f64>), cols: usize, table: &str) -> Result<()> {
    if row.1.len() < cols {
        return Err(parse_error(
            row.0,
            format!(
                "mpc.{table} row has {} columns, need at least {cols}",
                row.1.len()
            ),
        ));
    }
    Ok(())
}

fn as_index(v: f64, line: usize, what: &str) -> Result<usize> {
    if v < 1.0 || v.fract() != 0.0 || !v.is_finite() {
        return Err(parse_error(
            line,
            format!("{what} must be a positive integer, got {v}"),
        ));
    }
    Ok(v as usize)
}

/// Parse the documented MATPOWER subset into a [`GridModel`].
///
/// Out-of-service branches are dropped. Phase-shifting transformers and
/// isolated buses are rejected as unsupported.
pub fn parse_matpower_case(text: &str) -> Result<GridModel> {
    let (scalars, tables) = scan(text)?;
    let last_line = text.lines().count().max(1);
    let missing = |f: &str| parse_error(last_line, format!("missing field mpc.{f}"));

    let (bline, bval) = scalars.get("baseMVA").ok_or_else(|| missing("baseMVA"))?;
    let base_mva: f64 = bval
        .parse()
        .map_err(|_| parse_error(*bline, format!("baseMVA is not a number: '{bval}'")))?;

    let bus_table = tables.get("bus").ok_or_else(|| missing("bus"))?;
    let mut buses = Vec::with_capacity(bus_table.rows.len());
    let mut index_of = HashMap::new();
    for row in &bus_table.rows {
        require_cols(row, BUS_COLS, "bus")?;
        let c = &row.1;
        let number = as_index(c[0], row.0, "bus number")?;
        let kind = BusType::from_code(c[1]).map_err(|e| match e {
            Error::Unsupported(m) => Error::Unsupported(format!("{m} at line {}", row.0)),
            other => parse_error(row.0, other.to_string()),
        })?;
        if index_of.insert(number, buses.len()).is_some() {
            return Err(parse_error(row.0, format!("duplicate bus number {number}")));
        }
        buses.push(Bus {
            number,
            kind,
            pd: c[2],
            qd: c[3],
            gs: c[4],
            bs: c[5],
            vm: c[7],
            va: c[8],
            base_kv: c[9],
        });
    }
    let lookup = |v: f64, line: usize| -> Result<usize> {
        let number = as_index(v, line, "bus reference")?;
        index_of
            .get(&number)
            .copied()
            .ok_or_else(|| parse_error(line, format!("unknown bus {number}")))
    };

    let gen_table = tables.get("gen").ok_or_else(|| missing("gen"))?;
    let mut generators = Vec::with_capacity(gen_table.rows.len());
    for row in &gen_table.rows {
        require_cols(row, GEN_COLS, "gen")?;
        let c = &row.1;
        generators.push(Generator {
            bus: lookup(c[0], row.0)?,
            pg: c[1],
            qg: c[2],
            vg: c[5],
            in_service: c[7] > 0.0,
        });
    }

    let branch_table = tables.get("branch").ok_or_else(|| missing("branch"))?;
    let mut branches = Vec::with_capacity(branch_table.rows.len());
    for row in &branch_table.rows {
        require_cols(row, BRANCH_COLS, "branch")?;
        let c = &row.1;
        if c[10] <= 0.0 {
            log::debug!("dropping out-of-service branch at line {}", row.0);
            continue;
        }
        if c[9] != 0.0 {
            return Err(Error::Unsupported(format!(
                "phase-shifting transformer (angle {}) at line {}",
                c[9], row.0
            )));
        }
        branches.push(Branch {
            from: lookup(c[0], row.0)?,
            to: lookup(c[1], row.0)?,
            r: c[2],
            x: c[3],
            b: c[4],
            tap: c[8],
        });
    }

    GridModel::new(base_mva, buses, generators, branches).map_err(|e| match e {
        Error::InvalidArgument(m) => parse_error(last_line, m),
        other => other,
    })
}

/// Canonical MATPOWER text for `grid`; parsing it yields an equal model.
pub fn to_matpower_case(grid: &GridModel) -> String {
    let mut s = String::new();
    let num = |i: usize| grid.buses()[i].number;
    writeln!(s, "function mpc = case_canonical").unwrap();
    writeln!(s, "mpc.version = '2';").unwrap();
    writeln!(s, "mpc.baseMVA = {};", grid.base_mva).unwrap();
    writeln!(
        s,
        "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin"
    )
    .unwrap();
    writeln!(s, "mpc.bus = [").unwrap();
    for b in grid.buses() {
        writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t{}\t1\t1.1\t0.9;",
            b.number,
            b.kind.code(),
            b.pd,
            b.qd,
            b.gs,
            b.bs,
            b.vm,
            b.va,
            b.base_kv
        )
        .unwrap();
    }
    writeln!(s, "];").unwrap();
    writeln!(
        s,
        "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin"
    )
    .unwrap();
    writeln!(s, "mpc.gen = [").unwrap();
    for g in grid.generators() {
        writeln!(
            s,
            "\t{}\t{}\t{}\t0\t0\t{}\t{}\t{}\t0\t0;",
            num(g.bus),
            g.pg,
            g.qg,
            g.vg,
            grid.base_mva,
            g.in_service as u8
        )
        .unwrap();
    }
    writeln!(s, "];").unwrap();
    writeln!(
        s,
        "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus"
    )
    .unwrap();
    writeln!(s, "mpc.branch = [").unwrap();
    for br in grid.branches() {
        writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t0\t0\t0\t{}\t0\t1;",
            num(br.from),
            num(br.to),
            br.r,
            br.x,
            br.b,
            br.tap
        )
        .unwrap();
    }
    writeln!(s, "];").unwrap();
    s
}

/// The IEEE 30-bus case shipped with the crate.
pub const IEEE30_CASE: &str = include_str!("../../data/case30.m");

pub fn ieee30() -> GridModel {
    parse_matpower_case(IEEE30_CASE).expect("bundled case parses")
}
