//! Whole-model gradient verification, reported per parameter group.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy_loss, param_group, Model};
use crate::params::Binding;
use crate::rng::RngState;
use crate::tensor::{grad_check, GradCheckOptions, Mode, Stencil, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub coords_checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRow {
    pub name: String,
    pub group: String,
    pub max_relative_error: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGradReport {
    /// One row per parameter tensor in declaration order.
    pub tensors: Vec<TensorRow>,
    pub groups: Vec<GroupCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl ModelGradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_relative_error < self.tolerance)
    }

    pub fn failing(&self) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| g.max_relative_error >= self.tolerance).collect()
    }

    pub fn worst_tensor(&self) -> Option<&TensorRow> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

/// Options suited to a whole-model check in 64-bit: a fourth-order stencil
/// with a step large enough that rounding in the loss stays near 1e-13.
pub fn model_check_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-3,
        stencil: Stencil::FourPoint,
        floor: 1e-7,
        max_coords: Some(100),
        seed,
        fault: None,
    }
}

/// Mean cross-entropy of `batch` (padded ids, target) in eval mode.
pub fn batch_loss(model: &Model<f64>, tape: &Tape<f64>, params: &Binding, batch: &[(Vec<usize>, usize)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut rng = RngState::new(0);
    for (items, target) in batch {
        let out = model.forward(tape, params, items, Mode::Eval, &mut rng)?;
        let loss = cross_entropy_loss(tape, out.logits, *target)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    Ok(tape.affine(total, 1.0 / batch.len() as f64, 0.0))
}

/// Compares reverse-mode and finite-difference gradients of the mean batch
/// loss for every parameter tensor and folds the results by group.
pub fn check_model_gradients(
    model: &Model<f64>,
    batch: &[(Vec<usize>, usize)],
    opts: &GradCheckOptions,
    tolerance: f64,
) -> Result<ModelGradReport> {
    let params = model.params.tensors();
    let report = grad_check(
        params,
        |tape, vars| batch_loss(model, tape, &Binding::from_vars(vars.to_vec()), batch),
        opts,
    )?;
    let mut groups: BTreeMap<&str, GroupCheck> = BTreeMap::new();
    let mut tensors = Vec::with_capacity(report.per_tensor.len());
    for ((name, _), check) in model.params.iter().zip(&report.per_tensor) {
        let g = param_group(name);
        tensors.push(TensorRow {
            name: name.to_string(),
            group: g.to_string(),
            max_relative_error: check.max_relative_error,
            coords_checked: check.coords_checked,
        });
        let entry = groups.entry(g).or_insert_with(|| GroupCheck {
            group: g.to_string(),
            max_relative_error: 0.0,
            worst_tensor: name.to_string(),
            coords_checked: 0,
        });
        entry.coords_checked += check.coords_checked;
        if check.max_relative_error > entry.max_relative_error {
            entry.max_relative_error = check.max_relative_error;
            entry.worst_tensor = name.to_string();
        }
    }
    Ok(ModelGradReport {
        tensors,
        groups: groups.into_values().collect(),
        max_relative_error: report.max_relative_error,
        tolerance,
    })
}

/// Moves the model to a generic point for gradient checking.
///
/// Initialization leaves exact zeros that make the loss non-smooth
/// (zero-mean normalized rows put every squeeze-excitation bottleneck unit
/// on its ReLU kink). This adds `N(0, scale²)` noise to every parameter
/// except the padding row, redrawing until every ReLU input over `batch` is
/// at least `margin` away from zero. Returns the achieved margin.
pub fn move_to_generic_point(
    model: &mut Model<f64>,
    batch: &[(Vec<usize>, usize)],
    rng: &mut RngState,
    scale: f64,
    margin: f64,
) -> Result<f64> {
    const ATTEMPTS: usize = 1000;
    let base = model.params.clone();
    for _ in 0..ATTEMPTS {
        model.params = base.clone();
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            for v in model.params.get_mut(id).data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += scale * z;
            }
        }
        model.params.get_mut(model.layout.item_table).row_mut(0).fill(0.0);
        let tape = Tape::new();
        let params = model.params.bind(&tape);
        batch_loss(model, &tape, &params, batch)?;
        let achieved = tape.relu_margin().unwrap_or(f64::INFINITY);
        if achieved >= margin {
            return Ok(achieved);
        }
    }
    model.params = base;
    Err(Error::Domain(format!(
        "no parameter point with ReLU margin {margin} found in {ATTEMPTS} draws"
    )))
}
