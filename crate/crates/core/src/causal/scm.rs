//! Discrete structural causal model `C ← D → X`, `C → Y ← X` and the
//! backdoor-adjustment oracle over it.
//!
//! Text format (blank lines and `#` comments ignored; tables row-major):
//!
//! ```text
//! scm v1
//! sizes <|D|> <|C|> <|X|> <|Y|>
//! p_d
//! <|D| values>
//! p_c_given_d
//! <|C| values>            one row per d
//! p_x_given_d
//! <|X| values>            one row per d
//! p_y_given_xc
//! <|Y| values>            one row per (x, c), x-major
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ScmTable {
    pub p_d: Vec<f64>,
    /// `[d][c]`
    pub p_c_given_d: Vec<Vec<f64>>,
    /// `[d][x]`
    pub p_x_given_d: Vec<Vec<f64>>,
    /// `[x][c][y]`
    pub p_y_given_xc: Vec<Vec<Vec<f64>>>,
}

/// Which graph the identity checks run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Graph {
    /// `D → X` cut, `X` set uniformly by intervention.
    Mutilated,
    /// The original, confounded graph (negative control).
    Observational,
}

/// Max absolute deviation of each identity, plus the adjusted and enumerated
/// interventional distributions per value of `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub graph: Graph,
    /// `max_c |P_b(c) - P(c)|`
    pub marginal_invariance: f64,
    /// `max |P_b(y|x,c) - P(y|x,c)|`
    pub response_invariance: f64,
    /// `max |P_b(c|x) - P_b(c)|`
    pub independence: f64,
    /// `backdoor[x][y]` from the adjustment formula.
    pub backdoor: Vec<Vec<f64>>,
    /// `enumerated[x][y] = P_b(y|x)` by summing the graph's joint.
    pub enumerated: Vec<Vec<f64>>,
}

impl IdentityReport {
    pub fn max_deviation(&self) -> f64 {
        let adj = self
            .backdoor
            .iter()
            .flatten()
            .zip(self.enumerated.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        [self.marginal_invariance, self.response_invariance, self.independence, adj]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn check_row(name: &str, row: &[f64], want: usize) -> Result<()> {
    if row.len() != want {
        return Err(Error::Spec(format!("{name}: expected {want} entries, got {}", row.len())));
    }
    if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Spec(format!("{name}: entries must be finite and non-negative")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::Spec(format!("{name}: row sums to {s}, not 1")));
    }
    Ok(())
}

impl ScmTable {
    pub fn sizes(&self) -> (usize, usize, usize, usize) {
        let nd = self.p_d.len();
        let nc = self.p_c_given_d.first().map_or(0, Vec::len);
        let nx = self.p_x_given_d.first().map_or(0, Vec::len);
        let ny = self.p_y_given_xc.first().and_then(|r| r.first()).map_or(0, Vec::len);
        (nd, nc, nx, ny)
    }

    pub fn validate(&self) -> Result<()> {
        let (nd, nc, nx, ny) = self.sizes();
        if nd == 0 || nc == 0 || nx == 0 || ny == 0 {
            return Err(Error::Spec("all domains must be non-empty".into()));
        }
        check_row("p_d", &self.p_d, nd)?;
        if self.p_c_given_d.len() != nd || self.p_x_given_d.len() != nd || self.p_y_given_xc.len() != nx {
            return Err(Error::Spec("conditional table has the wrong number of rows".into()));
        }
        for (d, row) in self.p_c_given_d.iter().enumerate() {
            check_row(&format!("p_c_given_d[{d}]"), row, nc)?;
        }
        for (d, row) in self.p_x_given_d.iter().enumerate() {
            check_row(&format!("p_x_given_d[{d}]"), row, nx)?;
        }
        for (x, rows) in self.p_y_given_xc.iter().enumerate() {
            if rows.len() != nc {
                return Err(Error::Spec(format!("p_y_given_xc[{x}] has {} rows, want {nc}", rows.len())));
            }
            for (c, row) in rows.iter().enumerate() {
                check_row(&format!("p_y_given_xc[{x}][{c}]"), row, ny)?;
            }
        }
        Ok(())
    }

    /// Observational joint `P(d, c, x, y)` indexed `[d][c][x][y]`.
    fn joint(&self, graph: Graph) -> Vec<Vec<Vec<Vec<f64>>>> {
        let (nd, nc, nx, ny) = self.sizes();
        let mut j = vec![vec![vec![vec![0.0; ny]; nx]; nc]; nd];
        for d in 0..nd {
            for c in 0..nc {
                for x in 0..nx {
                    let px = match graph {
                        Graph::Observational => self.p_x_given_d[d][x],
                        Graph::Mutilated => 1.0 / nx as f64,
                    };
                    for y in 0..ny {
                        j[d][c][x][y] = self.p_d[d] * self.p_c_given_d[d][c] * px * self.p_y_given_xc[x][c][y];
                    }
                }
            }
        }
        j
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("unexpected end of input, expected {what}"),
            })
        };
        let (ln, header) = next("header")?;
        if header != "scm v1" {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 'scm v1', found '{header}'"),
            });
        }
        let (ln, sizes_line) = next("sizes")?;
        let mut parts = sizes_line.split_whitespace();
        if parts.next() != Some("sizes") {
            return Err(Error::Parse {
                line: ln,
                msg: "expected 'sizes <D> <C> <X> <Y>'".into(),
            });
        }
        let sizes: Vec<usize> = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: ln,
                msg: format!("bad size: {e}"),
            })?;
        let &[nd, nc, nx, ny] = sizes.as_slice() else {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 4 sizes, got {}", sizes.len()),
            });
        };
        if sizes.contains(&0) {
            return Err(Error::Parse {
                line: ln,
                msg: "sizes must be positive".into(),
            });
        }
        let mut section = |name: &str, rows: usize, cols: usize| -> Result<Vec<Vec<f64>>> {
            let (ln, head) = next(name)?;
            if head != name {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("expected section '{name}', found '{head}'"),
                });
            }
            (0..rows)
                .map(|_| {
                    let (ln, row) = next(&format!("a row of {name}"))?;
                    let vals: Vec<f64> = row
                        .split_whitespace()
                        .map(str::parse::<f64>)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Parse {
                            line: ln,
                            msg: format!("bad number in {name}: {e}"),
                        })?;
                    if vals.len() != cols {
                        return Err(Error::Parse {
                            line: ln,
                            msg: format!("{name} row has {} values, expected {cols}", vals.len()),
                        });
                    }
                    Ok(vals)
                })
                .collect()
        };
        let p_d = section("p_d", 1, nd)?.remove(0);
        let p_c_given_d = section("p_c_given_d", nd, nc)?;
        let p_x_given_d = section("p_x_given_d", nd, nx)?;
        let flat = section("p_y_given_xc", nx * nc, ny)?;
        let p_y_given_xc = flat.chunks(nc).map(|c| c.to_vec()).collect();
        if let Some((ln, extra)) = lines.next() {
            return Err(Error::Parse {
                line: ln,
                msg: format!("trailing content '{extra}'"),
            });
        }
        let table = Self {
            p_d,
            p_c_given_d,
            p_x_given_d,
            p_y_given_xc,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let (nd, nc, nx, ny) = self.sizes();
        let row = |r: &[f64]| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        let mut s = format!("scm v1\nsizes {nd} {nc} {nx} {ny}\np_d\n{}\np_c_given_d\n", row(&self.p_d));
        for r in &self.p_c_given_d {
            let _ = writeln!(s, "{}", row(r));
        }
        s.push_str("p_x_given_d\n");
        for r in &self.p_x_given_d {
            let _ = writeln!(s, "{}", row(r));
        }
        s.push_str("p_y_given_xc\n");
        for (x, rows) in self.p_y_given_xc.iter().enumerate() {
            for (c, r) in rows.iter().enumerate() {
                let _ = writeln!(s, "{}  # x={x} c={c}", row(r));
            }
        }
        s
    }
}

struct Marginals {
    p_c: Vec<f64>,
    p_x: Vec<f64>,
    p_xc: Vec<Vec<f64>>,
    p_xcy: Vec<Vec<Vec<f64>>>,
}

fn marginals(j: &[Vec<Vec<Vec<f64>>>]) -> Marginals {
    let (nc, nx, ny) = (j[0].len(), j[0][0].len(), j[0][0][0].len());
    let mut m = Marginals {
        p_c: vec![0.0; nc],
        p_x: vec![0.0; nx],
        p_xc: vec![vec![0.0; nc]; nx],
        p_xcy: vec![vec![vec![0.0; ny]; nc]; nx],
    };
    for jd in j {
        for (c, jc) in jd.iter().enumerate() {
            for (x, jx) in jc.iter().enumerate() {
                for (y, &v) in jx.iter().enumerate() {
                    m.p_c[c] += v;
                    m.p_x[x] += v;
                    m.p_xc[x][c] += v;
                    m.p_xcy[x][c][y] += v;
                }
            }
        }
    }
    m
}

/// `P(Y | do(X = x)) = Σ_c P(Y | X = x, c)·P(c)`, with both factors computed
/// from the observational joint.
pub fn backdoor_adjust(scm: &ScmTable, x_value: usize) -> Result<Vec<f64>> {
    scm.validate()?;
    let (_, nc, nx, ny) = scm.sizes();
    if x_value >= nx {
        return Err(Error::Contract(format!("x = {x_value} outside domain of size {nx}")));
    }
    let m = marginals(&scm.joint(Graph::Observational));
    let mut out = vec![0.0; ny];
    for c in 0..nc {
        if m.p_c[c] == 0.0 {
            continue;
        }
        let pxc = m.p_xc[x_value][c];
        if pxc == 0.0 {
            return Err(Error::UndefinedConditional { x: x_value, c });
        }
        for (y, o) in out.iter_mut().enumerate() {
            *o += m.p_xcy[x_value][c][y] / pxc * m.p_c[c];
        }
    }
    Ok(out)
}

/// Checks on `graph`: (i) `P_b(c) = P(c)`, (ii) `P_b(y|x,c) = P(y|x,c)`,
/// (iii) `P_b(c|x) = P_b(c)`, and compares the adjustment formula with direct
/// enumeration of `P_b(y|x)`.
pub fn scm_identities_on(scm: &ScmTable, graph: Graph) -> Result<IdentityReport> {
    scm.validate()?;
    let (_, nc, nx, ny) = scm.sizes();
    let obs = marginals(&scm.joint(Graph::Observational));
    let b = marginals(&scm.joint(graph));

    let marginal_invariance = (0..nc).map(|c| (b.p_c[c] - obs.p_c[c]).abs()).fold(0.0, f64::max);

    let mut response_invariance: f64 = 0.0;
    let mut independence: f64 = 0.0;
    let mut enumerated = vec![vec![0.0; ny]; nx];
    for x in 0..nx {
        if b.p_x[x] == 0.0 {
            continue;
        }
        for c in 0..nc {
            independence = independence.max((b.p_xc[x][c] / b.p_x[x] - b.p_c[c]).abs());
            for y in 0..ny {
                enumerated[x][y] += b.p_xcy[x][c][y] / b.p_x[x];
            }
            if obs.p_xc[x][c] > 0.0 && b.p_xc[x][c] > 0.0 {
                for y in 0..ny {
                    let pb = b.p_xcy[x][c][y] / b.p_xc[x][c];
                    let po = obs.p_xcy[x][c][y] / obs.p_xc[x][c];
                    response_invariance = response_invariance.max((pb - po).abs());
                }
            }
        }
    }
    let backdoor = (0..nx).map(|x| backdoor_adjust(scm, x)).collect::<Result<Vec<_>>>()?;
    Ok(IdentityReport {
        graph,
        marginal_invariance,
        response_invariance,
        independence,
        backdoor,
        enumerated,
    })
}

pub fn scm_identities(scm: &ScmTable) -> Result<IdentityReport> {
    scm_identities_on(scm, Graph::Mutilated)
}

/// `max |P(c|x) - P(c)|` on the observational graph; non-zero whenever the
/// backdoor path carries dependence.
pub fn observational_independence_gap(scm: &ScmTable) -> Result<f64> {
    Ok(scm_identities_on(scm, Graph::Observational)?.independence)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor_table() -> ScmTable {
        // Y = X xor C, C uniform and independent of X.
        ScmTable {
            p_d: vec![0.5, 0.5],
            p_c_given_d: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            p_x_given_d: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            p_y_given_xc: vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            ],
        }
    }

    #[test]
    fn xor_symmetry() {
        let p = backdoor_adjust(&xor_table(), 0).unwrap();
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip() {
        let t = xor_table();
        assert_eq!(ScmTable::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "scm v1\nsizes 2 1 1 1\np_d\n0.5 0.5\np_c_given_d\n1\nnot-a-number\n";
        match ScmTable::parse(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_rows_rejected() {
        let mut t = xor_table();
        t.p_d = vec![0.6, 0.6];
        assert!(matches!(t.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn zero_probability_cell_is_reported() {
        // X = D and C = D: the cell (x = 0, c = 1) never occurs.
        let t = ScmTable {
            p_d: vec![0.5, 0.5],
            p_c_given_d: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            p_x_given_d: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            p_y_given_xc: vec![vec![vec![0.5, 0.5]; 2]; 2],
        };
        assert!(matches!(
            backdoor_adjust(&t, 0),
            Err(Error::UndefinedConditional { x: 0, c: 1 })
        ));
    }
}
