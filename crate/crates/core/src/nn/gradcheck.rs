//! Finite-difference verification suite over the network's building blocks.
//!
//! Shared by the test harness and the `gradcheck` CLI command: every unit
//! builds a small f64 graph with seeded random weights and inputs, then
//! compares tape gradients against central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{grad_check, grad_check_params, ParamStore, Tape, Var};
use crate::nn::ops;
use crate::nn::{build_custom_cnn, forward_layer, kaiming_init, Builder, Layer, Mode};
use crate::optim::cross_entropy_op;
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Layers,
    Blocks,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "layers" => Ok(Self::Layers),
            "blocks" => Ok(Self::Blocks),
            "model" => Ok(Self::Model),
            other => Err(format!("unknown scope '{other}' (expected layers|blocks|model)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnitReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, mean: f64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mean, std).unwrap();
    for (_, p) in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::from_fn(&shape, |_| dist.sample(&mut rng));
    }
}

fn wavy_input(shape: &[usize], phase: usize) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i * (2 * phase + 3)) as f64 * 0.137).sin())
}

fn check_layer_unit(
    name: &str,
    build: impl FnOnce(&mut Builder<f64>) -> Layer,
    input: Tensor<f64>,
    samples: usize,
    seed: u64,
) -> UnitReport {
    let mut store = ParamStore::<f64>::new();
    let mut bufs = Vec::new();
    let mut b = Builder { params: &mut store, buffers: &mut bufs };
    let layer = build(&mut b);
    randomize(&mut store, seed, 0.1, 0.4);
    let report = grad_check_params(
        |tape, store| {
            let mut bufs = bufs.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x = tape.constant(input.clone());
            let y = forward_layer(&layer, store, &mut bufs, tape, x, Mode::Train, &mut rng)
                .expect("unit forward");
            let s = tape.sigmoid(y);
            tape.sum_all(s)
        },
        &mut store,
        samples,
        GRADCHECK_TOLERANCE,
        seed,
    )
    .expect("gradcheck runs");
    UnitReport {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        coords_checked: report.coords_checked,
        pass: report.pass,
    }
}

fn check_input_unit(
    name: &str,
    f: impl Fn(&mut Tape<f64>, Var) -> Var,
    input: Tensor<f64>,
) -> UnitReport {
    let report = grad_check(f, &input, GRADCHECK_TOLERANCE).expect("gradcheck runs");
    UnitReport {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        coords_checked: report.coords_checked,
        pass: report.pass,
    }
}

fn layer_units(seed: u64) -> Vec<UnitReport> {
    vec![
        check_layer_unit(
            "conv3x3",
            |b| b.conv("c", 2, 3, 3, 1, 1, true),
            wavy_input(&[2, 2, 5, 5], 1),
            32,
            seed,
        ),
        check_layer_unit(
            "conv1x1_stride2",
            |b| b.conv("c", 3, 4, 1, 2, 0, false),
            wavy_input(&[2, 3, 6, 6], 2),
            24,
            seed.wrapping_add(1),
        ),
        check_layer_unit(
            "linear",
            |b| b.linear("fc", 6, 4, true),
            wavy_input(&[3, 6], 3),
            28,
            seed.wrapping_add(2),
        ),
        check_layer_unit(
            "batchnorm2d",
            |b| b.bn("bn", 3),
            wavy_input(&[2, 3, 4, 4], 4),
            16,
            seed.wrapping_add(3),
        ),
        check_layer_unit(
            "se_gate",
            |b| b.se("se", 8),
            wavy_input(&[2, 8, 4, 4], 5),
            16,
            seed.wrapping_add(4),
        ),
        check_input_unit(
            "maxpool3x3_s2",
            |tape, x| {
                let y = ops::maxpool2d_op(tape, x, 3, 2, 1).unwrap();
                let s = tape.sigmoid(y);
                tape.sum_all(s)
            },
            wavy_input(&[1, 2, 6, 6], 6),
        ),
        check_input_unit(
            "relu_sigmoid_chain",
            |tape, x| {
                let r = tape.relu(x);
                let s = tape.sigmoid(r);
                tape.sum_all(s)
            },
            // offset keeps every coordinate away from the ReLU kink, where
            // central differences straddle the subgradient
            wavy_input(&[4, 7], 7).map(|v| v + 0.35),
        ),
    ]
}

fn block_units(seed: u64) -> Vec<UnitReport> {
    vec![
        check_layer_unit(
            "residual_se_identity",
            |b| b.residual_se_block("blk", 8, 8, 1, 0.0),
            wavy_input(&[1, 8, 6, 6], 8),
            12,
            seed.wrapping_add(10),
        ),
        check_layer_unit(
            "residual_se_projection_s2",
            |b| b.residual_se_block("blk", 8, 16, 2, 0.0),
            wavy_input(&[1, 8, 6, 6], 9),
            12,
            seed.wrapping_add(11),
        ),
    ]
}

fn model_unit(seed: u64) -> UnitReport {
    let mut model = build_custom_cnn::<f64>(8, 2, 0.0, 0.0).expect("tiny model builds");
    kaiming_init(&mut model, seed);
    let input = wavy_input(&[2, 3, 16, 16], 12);
    let labels = [0usize, 1];
    let root = model.root;
    let mut store = model.params;
    let bufs = model.buffers;
    let report = grad_check_params(
        |tape, store| {
            let mut bufs = bufs.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x = tape.constant(input.clone());
            let logits = forward_layer(&root, store, &mut bufs, tape, x, Mode::Train, &mut rng)
                .expect("model forward");
            cross_entropy_op(tape, logits, &labels).expect("loss")
        },
        &mut store,
        6,
        GRADCHECK_TOLERANCE,
        seed,
    )
    .expect("gradcheck runs");
    UnitReport {
        name: "custom_cnn_c8_16x16".to_string(),
        max_rel_err: report.max_rel_err,
        coords_checked: report.coords_checked,
        pass: report.pass,
    }
}

/// Run one scope of the verification suite. Deterministic per seed.
pub fn run(scope: Scope, seed: u64) -> Vec<UnitReport> {
    match scope {
        Scope::Layers => layer_units(seed),
        Scope::Blocks => block_units(seed),
        Scope::Model => vec![model_unit(seed)],
    }
}

/// Every scope back to back, as the acceptance suite consumes it.
pub fn run_all(seed: u64) -> Vec<UnitReport> {
    let mut out = layer_units(seed);
    out.extend(block_units(seed));
    out.push(model_unit(seed));
    out
}
