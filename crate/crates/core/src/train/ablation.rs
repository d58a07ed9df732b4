use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::trainer::{evaluate, train, TrainConfig, TrainSample};
use crate::error::{Error, Result};
use crate::ftvp::{CvtOptions, FtvpConfig, KvMode};
use crate::network::NetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Components added one at a time, from the plain encoder–decoder to
    /// the complete model.
    Accretion,
    /// The five key/value source pairs of the cross-view attention.
    KvCombos,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "accretion" => Ok(Suite::Accretion),
            "kv-combos" | "kv_combos" => Ok(Suite::KvCombos),
            _ => Err(Error::UnknownMode(s.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Accretion => "accretion",
            Suite::KvCombos => "kv-combos",
        }
    }

    /// Ordered variants derived from `base`. Width, input size, classes and
    /// λ come from `base`; everything the suite varies is overwritten.
    pub fn variants(self, base: &NetConfig) -> Vec<Variant> {
        let deepest = vec![base.deepest()];
        let multi = if base.ftvp_scales.is_empty() { deepest.clone() } else { base.ftvp_scales.clone() };
        let block = |cycle: bool, cvt: Option<CvtOptions>| {
            Some(FtvpConfig { cycle, cvt, ..base.ftvp.clone().unwrap_or_default() })
        };
        let net = |scales: &[usize], ftvp: Option<FtvpConfig>, ds: bool| NetConfig {
            ftvp_scales: scales.to_vec(),
            ftvp,
            deep_supervision: ds,
            ..base.clone()
        };
        let cvt = |kv: KvMode, selection: bool| Some(CvtOptions { kv, selection });
        match self {
            Suite::Accretion => {
                let full = block(true, cvt(KvMode::FrontCycled, true));
                vec![
                    Variant::new("Baseline", None, net(&deepest, None, false)),
                    Variant::new("+ MLP", None, net(&deepest, block(false, None), false)),
                    Variant::new(
                        "+ Cross-view Correlation",
                        None,
                        net(&deepest, block(false, cvt(KvMode::FrontFront, false)), false),
                    ),
                    Variant::new(
                        "+ Cycle Structure",
                        None,
                        net(&deepest, block(true, cvt(KvMode::FrontCycled, false)), false),
                    ),
                    Variant::new("+ Feature Selection", None, net(&deepest, full.clone(), false)),
                    Variant::new("+ Multi-scale FTVPs", None, net(&multi, full.clone(), false)),
                    Variant::new("+ Deep Supervision", None, net(&multi, full, true)),
                ]
            }
            Suite::KvCombos => KvMode::ALL
                .iter()
                .map(|&kv| {
                    let (k, v) = kv.table_row();
                    let label = alloc::format!("K={k} V={v}");
                    Variant::new(&label, Some(kv), net(&multi, block(true, cvt(kv, true)), base.deep_supervision))
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub kv: Option<KvMode>,
    pub net: NetConfig,
}

impl Variant {
    fn new(label: &str, kv: Option<KvMode>, net: NetConfig) -> Self {
        Self { label: label.to_string(), kv, net }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub kv: Option<KvMode>,
    pub miou: f64,
    pub map: f64,
}

/// Train and evaluate every variant of `suite` with the same seed and
/// training settings, in suite order. `on_row` sees each row as it lands.
pub fn run_ablation(
    suite: Suite,
    base: &NetConfig,
    tc: &TrainConfig,
    train_set: &[TrainSample],
    test_set: &[TrainSample],
    on_row: &mut dyn FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in suite.variants(base) {
        let out = train(&v.net, tc, train_set, None, &mut |_| Ok(()))?;
        let report = evaluate(&out.params, &v.net, test_set)?;
        let row = AblationRow { label: v.label, kv: v.kv, miou: report.miou, map: report.map };
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}
