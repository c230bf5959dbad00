//! Communication accounting.
//!
//! Costs are logical bit counts derived from the model and codec settings,
//! never from the serialised byte length. A method with overall ratio `xi`
//! is charged `xi * C` per iteration, where `C` is the uncompressed cost of
//! one iteration (activations and labels forward, gradients back); the
//! forward and backward halves are charged `xi_fwd * C / 2` and
//! `xi_bwd * C / 2`.

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::vit::VitConfig;

pub const BITS_PER_FEATURE: f64 = 32.0;

/// Relative tolerance of budget comparisons, absorbing float summation error.
const BUDGET_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub forward: f64,
    pub backward: f64,
}

impl Ratios {
    pub const ONE: Ratios = Ratios {
        forward: 1.0,
        backward: 1.0,
    };

    pub fn overall(&self) -> f64 {
        (self.forward + self.backward) / 2.0
    }
}

/// Closed-form forward and backward ratios of a codec.
pub fn compute_ratio(codec: &CodecConfig, model: &VitConfig, batch: usize) -> Result<Ratios> {
    model.validate()?;
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    codec.validate(model, batch)?;
    let d = model.features() as f64;
    let same = |r: f64| Ratios {
        forward: r,
        backward: r,
    };
    Ok(match *codec {
        CodecConfig::Base => Ratios::ONE,
        CodecConfig::Adc(ref c) => same(c.ratio(batch, model.tokens())),
        CodecConfig::TopK { k } | CodecConfig::RandTopK { k, .. } => {
            let kept = k as f64 / d;
            Ratios {
                forward: kept * (1.0 + d.log2() / BITS_PER_FEATURE),
                backward: kept,
            }
        }
        CodecConfig::BottleNet { width } => same(width as f64 / model.dim as f64),
        // A short final group is padded to a full slot.
        CodecConfig::C3sl { ratio } => same(batch.div_ceil(ratio) as f64 / batch as f64),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub batch: usize,
    /// Features per sample `D = n * d`.
    pub features: usize,
    pub classes: usize,
    pub bits_per_feature: f64,
}

impl CostModel {
    pub fn new(model: &VitConfig, batch: usize) -> Self {
        Self {
            batch,
            features: model.features(),
            classes: model.classes,
            bits_per_feature: BITS_PER_FEATURE,
        }
    }

    /// `B (D phi + log2 L)`
    pub fn base_forward(&self) -> f64 {
        self.batch as f64 * (self.features as f64 * self.bits_per_feature + (self.classes as f64).log2())
    }

    /// `B D phi`
    pub fn base_backward(&self) -> f64 {
        self.batch as f64 * self.features as f64 * self.bits_per_feature
    }

    pub fn base_iteration(&self) -> f64 {
        self.base_forward() + self.base_backward()
    }

    /// Bits charged for the forward and backward packets of one iteration.
    pub fn charges(&self, ratios: Ratios) -> (f64, f64) {
        let half = self.base_iteration() / 2.0;
        (ratios.forward * half, ratios.backward * half)
    }

    pub fn iteration_cost(&self, ratios: Ratios) -> f64 {
        let (f, b) = self.charges(ratios);
        f + b
    }

    /// Label bits actually carried by a forward packet: hard labels at
    /// `log2 L` bits each, or `T` soft-label vectors of `L` features.
    pub fn label_bits(&self, codec: &CodecConfig) -> f64 {
        match codec {
            CodecConfig::Adc(c) => c.clusters as f64 * self.classes as f64 * self.bits_per_feature,
            _ => self.batch as f64 * (self.classes as f64).log2(),
        }
    }

    /// Budget worth `epochs` passes over `iterations_per_epoch` base batches.
    pub fn budget_for_epochs(&self, epochs: f64, iterations_per_epoch: usize) -> f64 {
        epochs * iterations_per_epoch as f64 * self.base_iteration()
    }
}

/// Largest `i` with `i * cost <= budget`.
pub fn max_iterations(budget: f64, cost: f64) -> u64 {
    if cost <= 0.0 {
        return u64::MAX;
    }
    (budget / cost * (1.0 + BUDGET_SLACK)).floor() as u64
}

/// Running totals against a fixed bit budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub budget: f64,
    pub spent_forward: f64,
    pub spent_backward: f64,
    pub iterations: u64,
}

impl BudgetLedger {
    pub fn new(budget: f64) -> Self {
        Self {
            budget,
            spent_forward: 0.0,
            spent_backward: 0.0,
            iterations: 0,
        }
    }

    pub fn spent(&self) -> f64 {
        self.spent_forward + self.spent_backward
    }

    pub fn remaining(&self) -> f64 {
        (self.budget - self.spent()).max(0.0)
    }

    fn fits(&self, extra: f64) -> bool {
        self.spent() + extra <= self.budget * (1.0 + BUDGET_SLACK)
    }

    /// Pre-iteration check: an iteration costing `cost` runs only if it fits
    /// entirely.
    pub fn ensure_affordable(&self, cost: f64) -> Result<()> {
        if self.fits(cost) {
            Ok(())
        } else {
            Err(Error::BudgetExhausted {
                iterations: self.iterations,
            })
        }
    }

    pub fn charge_forward(&mut self, bits: f64) -> Result<()> {
        self.ensure_affordable(bits)?;
        self.spent_forward += bits;
        Ok(())
    }

    pub fn charge_backward(&mut self, bits: f64) -> Result<()> {
        self.ensure_affordable(bits)?;
        self.spent_backward += bits;
        Ok(())
    }

    pub fn complete_iteration(&mut self) {
        self.iterations += 1;
    }
}
