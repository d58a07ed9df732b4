//! Cross-view attention between the front-view features `X` and the
//! projected features `X′`.
//!
//! Every spatial location is one patch. Relevance is the cosine similarity of
//! projected query and key vectors; each query keeps only its best key (hard
//! max/argmax), the best key's index selects a value vector, and the fused
//! features re-enter `X′` through a residual weighted by the best relevance.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Zero-vector guard for the per-location normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Sources of key and value. The query is always `X′`; the fused
/// complement concatenated with the selected features is the key source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KvMode {
    /// K = V = X′.
    #[serde(rename = "q-only")]
    QOnly,
    /// K = X″, V = X″.
    #[serde(rename = "xpp-xpp")]
    CycledCycled,
    /// K = X, V = X.
    #[serde(rename = "x-x")]
    FrontFront,
    /// K = X″, V = X.
    #[serde(rename = "xpp-x")]
    CycledFront,
    /// K = X, V = X″.
    #[default]
    #[serde(rename = "x-xpp")]
    FrontCycled,
}

impl KvMode {
    pub const ALL: [KvMode; 5] =
        [KvMode::QOnly, KvMode::CycledCycled, KvMode::FrontFront, KvMode::CycledFront, KvMode::FrontCycled];

    pub fn label(self) -> &'static str {
        match self {
            KvMode::QOnly => "q-only",
            KvMode::CycledCycled => "xpp-xpp",
            KvMode::FrontFront => "x-x",
            KvMode::CycledFront => "xpp-x",
            KvMode::FrontCycled => "x-xpp",
        }
    }

    /// `(K, V)` row labels in the prime notation.
    pub fn table_row(self) -> (&'static str, &'static str) {
        match self {
            KvMode::QOnly => ("X'", "X'"),
            KvMode::CycledCycled => ("X''", "X''"),
            KvMode::FrontFront => ("X", "X"),
            KvMode::CycledFront => ("X''", "X"),
            KvMode::FrontCycled => ("X", "X''"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
        let mode = match norm.as_str() {
            "q-only" | "qonly" | "k=x'&v=x'" => KvMode::QOnly,
            "xpp-xpp" | "k=x''&v=x''" => KvMode::CycledCycled,
            "x-x" | "k=x&v=x" => KvMode::FrontFront,
            "xpp-x" | "k=x''&v=x" => KvMode::CycledFront,
            "x-xpp" | "k=x&v=x''" => KvMode::FrontCycled,
            _ => return Err(Error::UnknownMode(s.to_string())),
        };
        Ok(mode)
    }

    pub fn reads_cycled(self) -> bool {
        matches!(self, KvMode::CycledCycled | KvMode::CycledFront | KvMode::FrontCycled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvtOptions {
    pub kv: KvMode,
    /// Gather values at the best-matching key location. Without selection
    /// the value map is used location-aligned.
    pub selection: bool,
}

impl Default for CvtOptions {
    fn default() -> Self {
        Self { kv: KvMode::FrontCycled, selection: true }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CvtVars {
    pub proj_k: Var,
    pub proj_q: Var,
    pub proj_v: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

/// Tape handles of the attention internals.
#[derive(Clone, Debug)]
pub struct CvtTrace {
    /// Relevance `[hw, hw]`, rows are query locations.
    pub relevance: Var,
    /// Best relevance per query `[hw]`.
    pub attention: Var,
    /// Best key location per query.
    pub index: Vec<usize>,
    /// Selected value features `[C, h, w]`.
    pub selected: Var,
}

/// Materialized attention internals.
#[derive(Clone, Debug, PartialEq)]
pub struct CvtIntermediates<T> {
    pub relevance: Tensor<T>,
    pub attention: Tensor<T>,
    pub index: Vec<usize>,
    pub selected: Tensor<T>,
}

impl CvtTrace {
    pub fn materialize<T: Real>(&self, tape: &Tape<T>) -> CvtIntermediates<T> {
        CvtIntermediates {
            relevance: tape.value(self.relevance).clone(),
            attention: tape.value(self.attention).clone(),
            index: self.index.clone(),
            selected: tape.value(self.selected).clone(),
        }
    }
}

/// `r[i][j] = ⟨q_i/‖q_i‖, k_j/‖k_j‖⟩` over per-location channel vectors.
pub fn cross_view_relevance<T: Real>(tape: &mut Tape<T>, q: Var, k: Var) -> Result<Var> {
    let (c, h, w) = tape.value(q).dims3()?;
    if tape.shape(k) != [c, h, w] {
        return Err(shape_err(
            "cross_view_relevance",
            alloc::format!("query [{c},{h},{w}] vs key {:?}", tape.shape(k)),
        ));
    }
    let eps = T::from_f64(NORM_EPS);
    let qn = tape.l2_normalize_channel(q, eps)?;
    let kn = tape.l2_normalize_channel(k, eps)?;
    let qn = tape.reshape(qn, &[c, h * w])?;
    let qn = tape.transpose(qn)?;
    let kn = tape.reshape(kn, &[c, h * w])?;
    tape.matmul(qn, kn)
}

/// `X_out = X′ + conv3x3(concat(K_src, T)) ⊙ W`.
///
/// `cycled` may be `None` only for modes that do not read it.
pub fn cvt_forward<T: Real>(
    tape: &mut Tape<T>,
    front: Var,
    projected: Var,
    cycled: Option<Var>,
    p: &CvtVars,
    opts: &CvtOptions,
) -> Result<(Var, CvtTrace)> {
    let (c, h, w) = tape.value(projected).dims3()?;
    if tape.shape(front) != [c, h, w] || cycled.is_some_and(|v| tape.shape(v) != [c, h, w]) {
        return Err(shape_err("cvt_forward", String::from("X, X′ and X″ must share [C,h,w]")));
    }
    let need_cycled = || cycled.ok_or_else(|| Error::Config(String::from("cross-view mode needs the cycled features")));
    let (key_src, value_src) = match opts.kv {
        KvMode::QOnly => (projected, projected),
        KvMode::CycledCycled => (need_cycled()?, need_cycled()?),
        KvMode::FrontFront => (front, front),
        KvMode::CycledFront => (need_cycled()?, front),
        KvMode::FrontCycled => (front, need_cycled()?),
    };
    let key = tape.conv2d(key_src, p.proj_k, 1, 0)?;
    let query = tape.conv2d(projected, p.proj_q, 1, 0)?;
    let value = tape.conv2d(value_src, p.proj_v, 1, 0)?;

    let relevance = cross_view_relevance(tape, query, key)?;
    let (attention, index) = tape.rowwise_max_argmax(relevance)?;

    let selected = if opts.selection {
        let rows = tape.reshape(value, &[c, h * w])?;
        let rows = tape.transpose(rows)?;
        let picked = tape.gather_rows(rows, &index)?;
        let picked = tape.transpose(picked)?;
        tape.reshape(picked, &[c, h, w])?
    } else {
        value
    };

    let fused = tape.concat_channels(key_src, selected)?;
    let fused = tape.conv2d(fused, p.fuse_w, 1, 1)?;
    let fused = tape.add_channel_bias(fused, p.fuse_b)?;
    let weight = tape.reshape(attention, &[1, h, w])?;
    let weighted = tape.mul_broadcast(fused, weight)?;
    let out = tape.add(projected, weighted)?;
    Ok((out, CvtTrace { relevance, attention, index, selected }))
}
