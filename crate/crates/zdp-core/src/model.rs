//! Plain-text persistence for construction artifacts and trained networks.
//!
//! Files are line oriented: a header names the kind, scalar fields are
//! `key value` lines, and matrices are `matrix name rows cols` followed by
//! one whitespace-separated row per line. Floats are written with the
//! shortest representation that parses back to the identical bits, so a
//! loaded artifact saves to byte-identical text.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::linear_zdp::InvariantSubspace;
use crate::mlp::{Activation, Mlp};
use crate::runtime::LinearMap;

const CONSTRUCT_HEADER: &str = "zdp construct 1";
const CHECKPOINT_HEADER: &str = "zdp checkpoint 1";

/// Output of the linear synthesis stage: the invariant subspace, the
/// placement gain it came from, and the certified input gain of the
/// constructed output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstructArtifact {
    pub system: String,
    pub poles: Vec<f64>,
    pub chosen: Vec<f64>,
    /// Input gain of the constructed output's second derivative.
    pub p: f64,
    /// Placement gain row.
    pub k: RowDVector<f64>,
    /// n x nz subspace basis with identity bottom block.
    pub s: DMatrix<f64>,
    /// nz x gamma map gradients, column i for component i.
    pub s_eta: DMatrix<f64>,
    /// Reduced dynamics on the subspace.
    pub j: DMatrix<f64>,
}

impl ConstructArtifact {
    pub fn gamma(&self) -> usize {
        self.s_eta.ncols()
    }

    pub fn nz(&self) -> usize {
        self.s_eta.nrows()
    }

    pub fn subspace(&self) -> InvariantSubspace {
        InvariantSubspace {
            s: self.s.clone(),
            s_eta: self.s_eta.clone(),
            j: self.j.clone(),
            chosen_eigenvalues: self.chosen.clone(),
        }
    }

    pub fn linear_map(&self) -> LinearMap {
        LinearMap::new(self.s_eta.clone())
    }

    /// Output row [1 0 -grad psi_1^T] of the constructed output.
    pub fn output_row(&self) -> RowDVector<f64> {
        let nz = self.nz();
        let mut c = RowDVector::zeros(self.gamma() + nz);
        c[0] = 1.0;
        for i in 0..nz {
            c[self.gamma() + i] = -self.s_eta[(i, 0)];
        }
        c
    }
}

/// A trained manifold network bundled with the construction it extends.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mlp: Mlp,
    pub construct: ConstructArtifact,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Construct(ConstructArtifact),
    Checkpoint(Checkpoint),
}

pub fn save_construct(path: &Path, artifact: &ConstructArtifact) -> Result<()> {
    std::fs::write(path, construct_to_text(artifact)?)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint_to_text(checkpoint)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    parse_model(&std::fs::read_to_string(path)?)
}

pub fn load_construct(path: &Path) -> Result<ConstructArtifact> {
    match load_model(path)? {
        Model::Construct(a) => Ok(a),
        Model::Checkpoint(_) => Err(Error::ModelFormat {
            line: 1,
            reason: "expected a construction artifact, found a checkpoint".into(),
        }),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    match load_model(path)? {
        Model::Checkpoint(c) => Ok(c),
        Model::Construct(_) => Err(Error::ModelFormat {
            line: 1,
            reason: "expected a checkpoint, found a construction artifact".into(),
        }),
    }
}

pub fn construct_to_text(artifact: &ConstructArtifact) -> Result<String> {
    let mut out = String::new();
    out.push_str(CONSTRUCT_HEADER);
    out.push('\n');
    write_construct_body(&mut out, artifact)?;
    out.push_str("end\n");
    Ok(out)
}

pub fn checkpoint_to_text(checkpoint: &Checkpoint) -> Result<String> {
    let mlp = &checkpoint.mlp;
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    writeln!(out, "activation {}", mlp.activation().name()).unwrap();
    writeln!(out, "layers {}", mlp.layer_count()).unwrap();
    for l in 0..mlp.layer_count() {
        write_matrix(&mut out, &format!("w{l}"), &mlp.weights()[l])?;
        let b = &mlp.biases()[l];
        write_matrix(
            &mut out,
            &format!("b{l}"),
            &DMatrix::from_column_slice(1, b.len(), b.as_slice()),
        )?;
    }
    out.push_str("construct\n");
    write_construct_body(&mut out, &checkpoint.construct)?;
    out.push_str("end\n");
    Ok(out)
}

pub fn parse_model(text: &str) -> Result<Model> {
    let mut reader = LineReader::new(text);
    let (line, header) = reader.next_line()?;
    match header {
        CONSTRUCT_HEADER => {
            let artifact = parse_construct_body(&mut reader)?;
            reader.expect_end()?;
            Ok(Model::Construct(artifact))
        }
        CHECKPOINT_HEADER => {
            let checkpoint = parse_checkpoint_body(&mut reader)?;
            reader.expect_end()?;
            Ok(Model::Checkpoint(checkpoint))
        }
        other => Err(Error::ModelFormat {
            line,
            reason: format!("unknown header {other:?}"),
        }),
    }
}

fn write_construct_body(out: &mut String, artifact: &ConstructArtifact) -> Result<()> {
    if artifact.system.is_empty() || artifact.system.contains(char::is_whitespace) {
        return Err(Error::ModelFormat {
            line: 0,
            reason: "system name must be a single token".into(),
        });
    }
    writeln!(out, "system {}", artifact.system).unwrap();
    write_scalar_row(out, "poles", &artifact.poles)?;
    write_scalar_row(out, "chosen", &artifact.chosen)?;
    writeln!(out, "p {}", fmt_f64(artifact.p)?).unwrap();
    write_scalar_row(out, "k", artifact.k.as_slice())?;
    write_matrix(out, "s", &artifact.s)?;
    write_matrix(out, "s_eta", &artifact.s_eta)?;
    write_matrix(out, "j", &artifact.j)?;
    Ok(())
}

fn parse_construct_body(reader: &mut LineReader) -> Result<ConstructArtifact> {
    let system = reader.keyed_token("system")?;
    let poles = reader.keyed_floats("poles")?;
    let chosen = reader.keyed_floats("chosen")?;
    let p_row = reader.keyed_floats_unsized("p", 1)?;
    let k_row = reader.keyed_floats("k")?;
    let s = reader.matrix("s")?;
    let s_eta = reader.matrix("s_eta")?;
    let j = reader.matrix("j")?;

    let n = s.nrows();
    let nz = s.ncols();
    if nz >= n
        || s_eta.nrows() != nz
        || s_eta.ncols() != n - nz
        || j.nrows() != nz
        || j.ncols() != nz
    {
        return Err(Error::ModelFormat {
            line: reader.idx,
            reason: "subspace block shapes are inconsistent".into(),
        });
    }
    if k_row.len() != n || chosen.len() != nz {
        return Err(Error::ModelFormat {
            line: reader.idx,
            reason: "gain or eigenvalue count does not match the state split".into(),
        });
    }
    Ok(ConstructArtifact {
        system,
        poles,
        chosen,
        p: p_row[0],
        k: RowDVector::from_row_slice(&k_row),
        s,
        s_eta,
        j,
    })
}

fn parse_checkpoint_body(reader: &mut LineReader) -> Result<Checkpoint> {
    let act_name = reader.keyed_token("activation")?;
    let activation = Activation::from_name(&act_name).ok_or_else(|| Error::ModelFormat {
        line: reader.idx,
        reason: format!("unknown activation {act_name:?}"),
    })?;
    let layers_row = reader.keyed_floats_unsized("layers", 1)?;
    let layers = layers_row[0] as usize;
    if layers == 0 || layers_row[0].fract() != 0.0 {
        return Err(Error::ModelFormat {
            line: reader.idx,
            reason: "layer count must be a positive integer".into(),
        });
    }
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        weights.push(reader.matrix(&format!("w{l}"))?);
        let b = reader.matrix(&format!("b{l}"))?;
        if b.nrows() != 1 {
            return Err(Error::ModelFormat {
                line: reader.idx,
                reason: format!("bias b{l} must be a single row"),
            });
        }
        biases.push(DVector::from_column_slice(b.as_slice()));
    }
    let mlp = Mlp::from_parts(weights, biases, activation).map_err(|e| match e {
        Error::ModelFormat { reason, .. } => Error::ModelFormat {
            line: reader.idx,
            reason,
        },
        other => other,
    })?;
    let (line, tag) = reader.next_line()?;
    if tag != "construct" {
        return Err(Error::ModelFormat {
            line,
            reason: format!("expected construct section, found {tag:?}"),
        });
    }
    let construct = parse_construct_body(reader)?;
    Ok(Checkpoint { mlp, construct })
}

fn fmt_f64(v: f64) -> Result<String> {
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "model serialization",
        });
    }
    Ok(format!("{v}"))
}

fn write_scalar_row(out: &mut String, key: &str, values: &[f64]) -> Result<()> {
    write!(out, "{key} {}", values.len()).unwrap();
    for v in values {
        write!(out, " {}", fmt_f64(*v)?).unwrap();
    }
    out.push('\n');
    Ok(())
}

fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) -> Result<()> {
    writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols()).unwrap();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(' ');
            }
            out.push_str(&fmt_f64(m[(r, c)])?);
        }
        out.push('\n');
    }
    Ok(())
}

struct LineReader<'a> {
    lines: Vec<&'a str>,
    idx: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().collect(),
            idx: 0,
        }
    }

    /// Next line with its 1-based number.
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let line = self.lines.get(self.idx).ok_or(Error::ModelFormat {
            line: self.idx + 1,
            reason: "unexpected end of file".into(),
        })?;
        self.idx += 1;
        Ok((self.idx, line.trim_end()))
    }

    fn keyed_token(&mut self, key: &str) -> Result<String> {
        let (line, text) = self.next_line()?;
        let mut parts = text.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(k), Some(v), None) if k == key => Ok(v.to_string()),
            _ => Err(Error::ModelFormat {
                line,
                reason: format!("expected `{key} <value>`, found {text:?}"),
            }),
        }
    }

    /// `key count v1 .. vcount`.
    fn keyed_floats(&mut self, key: &str) -> Result<Vec<f64>> {
        let (line, text) = self.next_line()?;
        let mut parts = text.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::ModelFormat {
                line,
                reason: format!("expected `{key} ...`, found {text:?}"),
            });
        }
        let count: usize =
            parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::ModelFormat {
                    line,
                    reason: format!("expected a count after `{key}`"),
                })?;
        let values = parse_floats(parts, line)?;
        if values.len() != count {
            return Err(Error::ModelFormat {
                line,
                reason: format!("{key} declares {count} values, found {}", values.len()),
            });
        }
        Ok(values)
    }

    /// `key v1 .. vn` with a fixed expected count and no count token.
    fn keyed_floats_unsized(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        let (line, text) = self.next_line()?;
        let mut parts = text.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::ModelFormat {
                line,
                reason: format!("expected `{key} ...`, found {text:?}"),
            });
        }
        let values = parse_floats(parts, line)?;
        if values.len() != count {
            return Err(Error::ModelFormat {
                line,
                reason: format!("{key} needs {count} values, found {}", values.len()),
            });
        }
        Ok(values)
    }

    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let (line, text) = self.next_line()?;
        let parts: Vec<&str> = text.split_whitespace().collect();
        let (rows, cols) = match parts.as_slice() {
            ["matrix", n, r, c] if *n == name => {
                let rows = r.parse::<usize>().map_err(|_| Error::ModelFormat {
                    line,
                    reason: format!("bad row count {r:?}"),
                })?;
                let cols = c.parse::<usize>().map_err(|_| Error::ModelFormat {
                    line,
                    reason: format!("bad column count {c:?}"),
                })?;
                (rows, cols)
            }
            _ => {
                return Err(Error::ModelFormat {
                    line,
                    reason: format!("expected `matrix {name} rows cols`, found {text:?}"),
                })
            }
        };
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let (line, text) = self.next_line()?;
            let row = parse_floats(text.split_whitespace(), line)?;
            if row.len() != cols {
                return Err(Error::ModelFormat {
                    line,
                    reason: format!("matrix {name} row has {} entries, needs {cols}", row.len()),
                });
            }
            for (c, v) in row.into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        Ok(m)
    }

    fn expect_end(&mut self) -> Result<()> {
        let (line, text) = self.next_line()?;
        if text != "end" {
            return Err(Error::ModelFormat {
                line,
                reason: format!("expected end marker, found {text:?}"),
            });
        }
        if let Some(extra) = self.lines.get(self.idx) {
            if !extra.trim().is_empty() {
                return Err(Error::ModelFormat {
                    line: self.idx + 1,
                    reason: "trailing content after end marker".into(),
                });
            }
        }
        Ok(())
    }
}

fn parse_floats<'a, I: Iterator<Item = &'a str>>(parts: I, line: usize) -> Result<Vec<f64>> {
    parts
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::ModelFormat {
                line,
                reason: format!("bad float {t:?}"),
            })
        })
        .collect()
}
