//! The learnable user model: implicit per-identifier embeddings combined
//! with explicit embeddings of the user's textual tokens.
//!
//! Implicit variants encode structural preference assumptions:
//! - `Uniform`: one shared slab for every identifier (vanilla RLHF when the
//!   slab is empty),
//! - `Individualized`: a generic slab `e0` plus per-user offsets, offset 0
//!   pinned to zero so the unknown user maps to `e0`,
//! - `Cluster`: each user's slab is a weighted combination of `K` centers,
//!   a low-rank factorization of the individualized table.
//!
//! The explicit model is a plain lookup into the policy's token table, so
//! textual user information lives in the same representation space as the
//! input embedding and receives gradients through the same table.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, UserInfo};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::tensor::{axpy, dot, Matrix};

/// Scale of the seeded centered-uniform init for `e0` and cluster centers.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub enum ImplicitUserModel {
    Uniform {
        /// `T_u x d` slab shared by all identifiers; may have zero rows.
        shared: Matrix,
    },
    Individualized {
        /// Generic slab `e0` returned for identifier 0.
        generic: Matrix,
        /// Per-identifier offsets, index 0 pinned to zeros. Length `m + 1`.
        offsets: Vec<Matrix>,
        /// When false, known users map to their offset alone instead of
        /// `e0 + offset` (the "without generic" ablation); identifier 0
        /// still maps to `e0`.
        include_generic: bool,
    },
    Cluster {
        /// `K` cluster-center slabs of shape `T_u x d`.
        centers: Vec<Matrix>,
        /// `(m + 1) x K` combination weights; row 0 serves the unknown user
        /// and is trained through the user-agnostic loss term.
        weights: Matrix,
    },
}

impl ImplicitUserModel {
    pub fn uniform(t_u: usize, d: usize, rng: &mut impl Rng) -> Self {
        ImplicitUserModel::Uniform {
            shared: Matrix::uniform(t_u, d, INIT_SCALE, rng),
        }
    }

    pub fn individualized(num_users: u32, t_u: usize, d: usize, rng: &mut impl Rng) -> Self {
        ImplicitUserModel::Individualized {
            generic: Matrix::uniform(t_u, d, INIT_SCALE, rng),
            offsets: (0..=num_users).map(|_| Matrix::zeros(t_u, d)).collect(),
            include_generic: true,
        }
    }

    pub fn individualized_without_generic(
        num_users: u32,
        t_u: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ImplicitUserModel::Individualized {
            generic: Matrix::uniform(t_u, d, INIT_SCALE, rng),
            offsets: (0..=num_users).map(|_| Matrix::zeros(t_u, d)).collect(),
            include_generic: false,
        }
    }

    pub fn cluster(num_users: u32, k: usize, t_u: usize, d: usize, rng: &mut impl Rng) -> Self {
        assert!(k >= 1, "cluster model needs at least one center");
        ImplicitUserModel::Cluster {
            centers: (0..k).map(|_| Matrix::uniform(t_u, d, INIT_SCALE, rng)).collect(),
            weights: Matrix::zeros(num_users as usize + 1, k),
        }
    }

    /// The user token length `T_u`.
    pub fn user_token_len(&self) -> usize {
        match self {
            ImplicitUserModel::Uniform { shared } => shared.rows(),
            ImplicitUserModel::Individualized { generic, .. } => generic.rows(),
            ImplicitUserModel::Cluster { centers, .. } => centers[0].rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ImplicitUserModel::Uniform { shared } => shared.cols(),
            ImplicitUserModel::Individualized { generic, .. } => generic.cols(),
            ImplicitUserModel::Cluster { centers, .. } => centers[0].cols(),
        }
    }

    /// Highest known identifier `m`; the uniform variant accepts any id.
    pub fn num_users(&self) -> Option<u32> {
        match self {
            ImplicitUserModel::Uniform { .. } => None,
            ImplicitUserModel::Individualized { offsets, .. } => Some(offsets.len() as u32 - 1),
            ImplicitUserModel::Cluster { weights, .. } => Some(weights.rows() as u32 - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ImplicitUserModel::Uniform { .. } => Ok(()),
            ImplicitUserModel::Individualized { generic, offsets, .. } => {
                if offsets.is_empty() {
                    return Err(Error::config("individualized model needs the index-0 slab"));
                }
                if offsets[0].data().iter().any(|v| *v != 0.0) {
                    return Err(Error::Validation {
                        field: "offsets",
                        message: "offset slab for identifier 0 must be zero".into(),
                    });
                }
                for o in offsets {
                    if o.rows() != generic.rows() || o.cols() != generic.cols() {
                        return Err(Error::Validation {
                            field: "offsets",
                            message: "offset slabs must match the generic slab shape".into(),
                        });
                    }
                }
                Ok(())
            }
            ImplicitUserModel::Cluster { centers, weights } => {
                if centers.is_empty() {
                    return Err(Error::config("cluster model needs K >= 1 centers"));
                }
                let (t_u, d) = (centers[0].rows(), centers[0].cols());
                if centers.iter().any(|c| c.rows() != t_u || c.cols() != d) {
                    return Err(Error::Validation {
                        field: "V",
                        message: "cluster centers must share a shape".into(),
                    });
                }
                if weights.cols() != centers.len() {
                    return Err(Error::Validation {
                        field: "W",
                        message: "weight columns must equal the number of centers".into(),
                    });
                }
                Ok(())
            }
        }
    }
}

/// Explicit user model: a view of the policy's token embedding table.
#[derive(Clone, Copy, Debug)]
pub struct ExplicitUserModel<'a> {
    pub token_table: &'a Matrix,
}

impl<'a> ExplicitUserModel<'a> {
    pub fn from_policy(policy: &'a PolicyParams) -> Self {
        ExplicitUserModel {
            token_table: &policy.embed,
        }
    }
}

/// Concatenated implicit and explicit user embedding; implicit rows first.
#[derive(Clone, Debug, PartialEq)]
pub struct UserEmbedding {
    pub rows: Matrix,
    /// Number of leading rows produced by the implicit model.
    pub implicit_len: usize,
}

/// Implicit embedding slab for one identifier.
pub fn implicit_embed(model: &ImplicitUserModel, user_id: u32) -> Result<Matrix> {
    if let Some(m) = model.num_users() {
        if user_id > m {
            return Err(Error::domain(format!(
                "user id {user_id} out of range (num_users {m})"
            )));
        }
    }
    Ok(match model {
        ImplicitUserModel::Uniform { shared } => shared.clone(),
        ImplicitUserModel::Individualized {
            generic,
            offsets,
            include_generic,
        } => {
            let offset = &offsets[user_id as usize];
            if user_id == 0 || *include_generic {
                let mut out = generic.clone();
                axpy(1.0, offset.data(), out.data_mut());
                out
            } else {
                offset.clone()
            }
        }
        ImplicitUserModel::Cluster { centers, weights } => {
            let mut out = Matrix::zeros(centers[0].rows(), centers[0].cols());
            for (k, center) in centers.iter().enumerate() {
                axpy(weights.row(user_id as usize)[k], center.data(), out.data_mut());
            }
            out
        }
    })
}

/// Rows of the token table for the user's textual tokens; empty input gives
/// an empty tensor.
pub fn explicit_embed(model: &ExplicitUserModel, text_tokens: &[Token]) -> Matrix {
    let d = model.token_table.cols();
    let mut out = Matrix::zeros(text_tokens.len(), d);
    for (r, t) in text_tokens.iter().enumerate() {
        out.row_mut(r).copy_from_slice(model.token_table.row(t.0 as usize));
    }
    out
}

/// `f_P(u) = concat(f_im(u^p), f_ex(u^t))`.
pub fn embed_user(
    implicit: &ImplicitUserModel,
    explicit: &ExplicitUserModel,
    user: &UserInfo,
) -> Result<UserEmbedding> {
    let im = implicit_embed(implicit, user.user_id)?;
    let ex = explicit_embed(explicit, &user.text_tokens);
    let implicit_len = im.rows();
    let rows = if ex.is_empty() { im } else { im.vstack(&ex) };
    Ok(UserEmbedding { rows, implicit_len })
}

/// Accumulates the gradient w.r.t. one user's implicit slab into the
/// variant-matching accumulator. `grad_rows` holds the slab gradient in rows
/// `row_offset .. row_offset + T_u`.
pub fn accumulate_implicit_grad(
    model: &ImplicitUserModel,
    user_id: u32,
    grad_rows: &Matrix,
    row_offset: usize,
    out: &mut ImplicitGrad,
) {
    let t_u = model.user_token_len();
    match (model, out) {
        (ImplicitUserModel::Uniform { .. }, ImplicitGrad::Uniform { shared }) => {
            for r in 0..t_u {
                axpy(1.0, grad_rows.row(row_offset + r), shared.row_mut(r));
            }
        }
        (
            ImplicitUserModel::Individualized { include_generic, .. },
            ImplicitGrad::Individualized { generic, offsets },
        ) => {
            for r in 0..t_u {
                let g = grad_rows.row(row_offset + r);
                if user_id == 0 || *include_generic {
                    axpy(1.0, g, generic.row_mut(r));
                }
                if user_id > 0 {
                    axpy(1.0, g, offsets[user_id as usize].row_mut(r));
                }
            }
        }
        (
            ImplicitUserModel::Cluster { centers, weights },
            ImplicitGrad::Cluster {
                centers: gcenters,
                weights: gweights,
            },
        ) => {
            let uid = user_id as usize;
            for (k, center) in centers.iter().enumerate() {
                let mut inner = 0.0;
                for r in 0..t_u {
                    inner += dot(grad_rows.row(row_offset + r), center.row(r));
                }
                gweights.row_mut(uid)[k] += inner;
                let w = weights.row(uid)[k];
                for r in 0..t_u {
                    axpy(w, grad_rows.row(row_offset + r), gcenters[k].row_mut(r));
                }
            }
        }
        _ => unreachable!("gradient accumulator variant mismatch"),
    }
}

/// Gradient accumulator mirroring [`ImplicitUserModel`]. The offset slab for
/// identifier 0 stays structurally zero.
#[derive(Clone, Debug)]
pub enum ImplicitGrad {
    Uniform { shared: Matrix },
    Individualized { generic: Matrix, offsets: Vec<Matrix> },
    Cluster { centers: Vec<Matrix>, weights: Matrix },
}

impl ImplicitGrad {
    pub fn zeros_like(model: &ImplicitUserModel) -> Self {
        match model {
            ImplicitUserModel::Uniform { shared } => ImplicitGrad::Uniform {
                shared: Matrix::zeros(shared.rows(), shared.cols()),
            },
            ImplicitUserModel::Individualized { generic, offsets, .. } => {
                ImplicitGrad::Individualized {
                    generic: Matrix::zeros(generic.rows(), generic.cols()),
                    offsets: offsets
                        .iter()
                        .map(|o| Matrix::zeros(o.rows(), o.cols()))
                        .collect(),
                }
            }
            ImplicitUserModel::Cluster { centers, weights } => ImplicitGrad::Cluster {
                centers: centers
                    .iter()
                    .map(|c| Matrix::zeros(c.rows(), c.cols()))
                    .collect(),
                weights: Matrix::zeros(weights.rows(), weights.cols()),
            },
        }
    }
}

/// Frobenius norm of the difference between the stacked individualized
/// embeddings and the cluster factorization `W . V`, over all identifiers.
pub fn cluster_low_rank_error(
    individualized: &ImplicitUserModel,
    cluster: &ImplicitUserModel,
) -> Result<f64> {
    let m = individualized
        .num_users()
        .ok_or_else(|| Error::domain("first argument must be an individualized model"))?;
    let cm = cluster
        .num_users()
        .ok_or_else(|| Error::domain("second argument must be a cluster model"))?;
    if !matches!(individualized, ImplicitUserModel::Individualized { .. })
        || !matches!(cluster, ImplicitUserModel::Cluster { .. })
    {
        return Err(Error::domain(
            "cluster_low_rank_error expects (individualized, cluster) models",
        ));
    }
    if m != cm
        || individualized.user_token_len() != cluster.user_token_len()
        || individualized.dim() != cluster.dim()
    {
        return Err(Error::domain("models must share (m, T_u, d)"));
    }
    let mut sq = 0.0;
    for id in 0..=m {
        let a = implicit_embed(individualized, id)?;
        let b = implicit_embed(cluster, id)?;
        for (x, y) in a.data().iter().zip(b.data()) {
            sq += (x - y) * (x - y);
        }
    }
    Ok(sq.sqrt())
}

#[derive(Serialize, Deserialize)]
struct UserModelHeader {
    variant: String,
    m: u32,
    #[serde(rename = "T_u")]
    t_u: usize,
    d: usize,
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
}

fn write_matrix(writer: &mut impl Write, m: &Matrix, path: &Path) -> Result<()> {
    for r in 0..m.rows() {
        let mut line = String::new();
        for (i, v) in m.row(r).iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{v}"));
        }
        writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes a user-model checkpoint: JSON header plus row-major decimal
/// tensors in variant order.
pub fn save_user_model(model: &ImplicitUserModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    model.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let header = UserModelHeader {
        variant: match model {
            ImplicitUserModel::Uniform { .. } => "uniform".into(),
            ImplicitUserModel::Individualized { include_generic: true, .. } => {
                "individualized".into()
            }
            ImplicitUserModel::Individualized { include_generic: false, .. } => {
                "individualized-no-generic".into()
            }
            ImplicitUserModel::Cluster { .. } => "cluster".into(),
        },
        m: model.num_users().unwrap_or(0),
        t_u: model.user_token_len(),
        d: model.dim(),
        k: match model {
            ImplicitUserModel::Cluster { centers, .. } => Some(centers.len()),
            _ => None,
        },
    };
    writeln!(writer, "{}", serde_json::to_string(&header).expect("header json"))
        .map_err(|e| Error::io(path, e))?;
    match model {
        ImplicitUserModel::Uniform { shared } => write_matrix(&mut writer, shared, path)?,
        ImplicitUserModel::Individualized { generic, offsets, .. } => {
            write_matrix(&mut writer, generic, path)?;
            for o in offsets {
                write_matrix(&mut writer, o, path)?;
            }
        }
        ImplicitUserModel::Cluster { centers, weights } => {
            for c in centers {
                write_matrix(&mut writer, c, path)?;
            }
            write_matrix(&mut writer, weights, path)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn load_user_model(path: impl AsRef<Path>) -> Result<ImplicitUserModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = Vec::new();
    for line in reader.lines() {
        lines.push(line.map_err(|e| Error::io(path, e))?);
    }
    if lines.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "missing checkpoint header".into(),
        });
    }
    let header: UserModelHeader = serde_json::from_str(&lines[0]).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;

    let mut cursor = 1usize;
    let mut take_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = lines.get(cursor + r).ok_or(Error::Parse {
                line: cursor + r + 1,
                message: "unexpected end of checkpoint".into(),
            })?;
            let values: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::Parse {
                line: cursor + r + 1,
                message: e.to_string(),
            })?;
            if values.len() != cols {
                return Err(Error::Parse {
                    line: cursor + r + 1,
                    message: format!("expected {cols} values, found {}", values.len()),
                });
            }
            data.extend(values);
        }
        cursor += rows;
        Ok(Matrix::from_vec(rows, cols, data))
    };

    let model = match header.variant.as_str() {
        "uniform" => ImplicitUserModel::Uniform {
            shared: take_matrix(header.t_u, header.d)?,
        },
        "individualized" | "individualized-no-generic" => {
            let generic = take_matrix(header.t_u, header.d)?;
            let mut offsets = Vec::with_capacity(header.m as usize + 1);
            for _ in 0..=header.m {
                offsets.push(take_matrix(header.t_u, header.d)?);
            }
            ImplicitUserModel::Individualized {
                generic,
                offsets,
                include_generic: header.variant == "individualized",
            }
        }
        "cluster" => {
            let k = header.k.ok_or(Error::Parse {
                line: 1,
                message: "cluster checkpoint missing K".into(),
            })?;
            let mut centers = Vec::with_capacity(k);
            for _ in 0..k {
                centers.push(take_matrix(header.t_u, header.d)?);
            }
            let weights = take_matrix(header.m as usize + 1, k)?;
            ImplicitUserModel::Cluster { centers, weights }
        }
        other => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unknown user-model variant `{other}`"),
            })
        }
    };
    model.validate()?;
    Ok(model)
}
