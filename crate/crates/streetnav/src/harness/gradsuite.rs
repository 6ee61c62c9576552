//! The finite-difference verification suite behind the `gradcheck`
//! subcommand: every differentiable primitive and every model's full toy
//! loss, each reported as its worst per-coordinate relative error.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::graph::Action;
use crate::nav::{Ablation, ConvSpec, NavModel, NavModelConfig, NavModelKind};
use crate::sdr::{gaussian_target, SdrModel, SdrModelKind};
use crate::tensor::{finite_diff_check, lstm_step, LstmWeights, ParamStore};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn check_conv2d() -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (ci, co, h, w, k) = (2usize, 3usize, 5usize, 5usize, 3usize);
    let n = ci * h * w + co * ci * k * k;
    let x = random_vec(&mut rng, n);
    Ok(finite_diff_check(
        |_, v| {
            let img = v.slice_range(0, ci * h * w)?.reshape(&[ci, h, w])?;
            let kernel = v
                .slice_range(ci * h * w, co * ci * k * k)?
                .reshape(&[co, ci, k, k])?;
            let out = img.conv2d(&kernel, 2, 1)?;
            Ok(out.mul(&out)?.sum())
        },
        &x,
        GRADCHECK_EPS,
    )?)
}

fn check_deconv2d() -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (ci, co, h, w, k) = (3usize, 2usize, 4usize, 5usize, 3usize);
    let n = ci * h * w + ci * co * k * k;
    let x = random_vec(&mut rng, n);
    Ok(finite_diff_check(
        |_, v| {
            let img = v.slice_range(0, ci * h * w)?.reshape(&[ci, h, w])?;
            let kernel = v
                .slice_range(ci * h * w, ci * co * k * k)?
                .reshape(&[ci, co, k, k])?;
            let out = img.deconv2d(&kernel, 1, 1)?;
            Ok(out.mul(&out)?.sum())
        },
        &x,
        GRADCHECK_EPS,
    )?)
}

fn check_lstm_step() -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (hidden, input) = (4usize, 3usize);
    let n = 4 * hidden * (input + hidden) + 4 * hidden + input + 2 * hidden;
    let x = random_vec(&mut rng, n);
    Ok(finite_diff_check(
        |_, v| {
            let mut at = 0usize;
            let mut take = |len: usize| {
                let r = v.slice_range(at, len);
                at += len;
                r
            };
            let w_x = take(4 * hidden * input)?.reshape(&[4 * hidden, input])?;
            let w_h = take(4 * hidden * hidden)?.reshape(&[4 * hidden, hidden])?;
            let bias = take(4 * hidden)?;
            let xin = take(input)?;
            let h0 = take(hidden)?;
            let c0 = take(hidden)?;
            let (h1, c1) = lstm_step(
                &xin,
                &h0,
                &c0,
                &LstmWeights {
                    w_x: &w_x,
                    w_h: &w_h,
                    bias: &bias,
                },
            )?;
            let mixed = h1.mul(&h1)?.add(&c1.mul(&c1)?)?;
            Ok(mixed.sum())
        },
        &x,
        GRADCHECK_EPS,
    )?)
}

fn check_softmax_kl() -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (h, w) = (4usize, 6usize);
    let x = random_vec(&mut rng, h * w);
    let target = gaussian_target(10.0, 6.0, h, w, 4.0, 1.5)?.probs().to_vec();
    Ok(finite_diff_check(
        move |_, v| v.reshape(&[h, w])?.softmax_pixels()?.kl_from_target(&target),
        &x,
        GRADCHECK_EPS,
    )?)
}

fn check_sdr_model(kind: SdrModelKind, seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = SdrModel::init(&mut store, "m", kind, 4, 8, 2, 8, 0.1, &mut rng)?;
    let (h, w) = (4usize, 8usize);
    let features = random_vec(&mut rng, 4 * h * w);
    let text = random_vec(&mut rng, 8);
    let target = gaussian_target(12.0, 9.0, h, w, 4.0, 1.5)?.probs().to_vec();
    let flat = store.flatten();
    Ok(finite_diff_check(
        |tape, v| {
            let params = store.tensors_from_flat(v)?;
            let f = tape.constant(&[4, h, w], features.clone())?;
            let t = tape.constant(&[8], text.clone())?;
            let dist = model.forward(&params, &f, Some(&t))?;
            dist.kl_from_target(&target)
        },
        &flat,
        GRADCHECK_EPS,
    )?)
}

fn toy_nav_config(kind: NavModelKind) -> NavModelConfig {
    NavModelConfig {
        kind,
        vocab_size: 6,
        word_dim: 3,
        text_hidden: 4,
        obs_h: 8,
        obs_w: 8,
        conv: vec![
            ConvSpec {
                out_channels: 2,
                kernel: 4,
                stride: 2,
            },
            ConvSpec {
                out_channels: 3,
                kernel: 3,
                stride: 1,
            },
        ],
        obs_repr: 4,
        action_embed: 3,
        lstm_hidden: 5,
        time_embed: 2,
        horizon: 6,
        gated_repr: 4,
        init_bound: 0.1,
    }
}

fn check_nav_model(kind: NavModelKind, seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = NavModel::init(&mut store, "nav", toy_nav_config(kind), &mut rng)?;
    let tokens = crate::text::TokenSeq::new(vec![1, 4, 2], 6)?;
    let obs0 = random_vec(&mut rng, 64);
    let obs1 = random_vec(&mut rng, 64);
    let flat = store.flatten();
    Ok(finite_diff_check(
        |tape, v| {
            let params = store.tensors_from_flat(v)?;
            let text = model.encode_instruction(&params, tape, &tokens, Ablation::None)?;
            let carry = model.initial_carry(tape);
            let s0 = model
                .step(&params, tape, &text, &obs0, None, 0, &carry, Ablation::None)
                .map_err(to_tensor_err)?;
            let s1 = model
                .step(
                    &params,
                    tape,
                    &text,
                    &obs1,
                    Some(Action::Forward),
                    1,
                    &s0.carry,
                    Ablation::None,
                )
                .map_err(to_tensor_err)?;
            Ok(s0
                .log_probs
                .pick(Action::Forward.index())?
                .add(&s1.log_probs.pick(Action::Stop.index())?)?
                .neg())
        },
        &flat,
        GRADCHECK_EPS,
    )?)
}

fn to_tensor_err(e: crate::nav::NavError) -> crate::tensor::TensorError {
    match e {
        crate::nav::NavError::Tensor(t) => t,
        other => crate::tensor::TensorError::Invalid {
            op: "nav_step",
            msg: other.to_string(),
        },
    }
}

/// Runs every check and returns op name -> max relative error.
pub fn run_gradcheck_suite() -> Result<BTreeMap<String, f64>, HarnessError> {
    let mut out = BTreeMap::new();
    out.insert("conv2d".to_string(), check_conv2d()?);
    out.insert("deconv2d".to_string(), check_deconv2d()?);
    out.insert("lstm_step".to_string(), check_lstm_step()?);
    out.insert("softmax_kl".to_string(), check_softmax_kl()?);
    out.insert(
        "lingunet".to_string(),
        check_sdr_model(SdrModelKind::LingUnet, 201)?,
    );
    out.insert(
        "concat".to_string(),
        check_sdr_model(SdrModelKind::Concat, 202)?,
    );
    out.insert(
        "concatconv".to_string(),
        check_sdr_model(SdrModelKind::ConcatConv, 203)?,
    );
    out.insert(
        "text2conv".to_string(),
        check_sdr_model(SdrModelKind::Text2Conv, 204)?,
    );
    out.insert(
        "rconcat".to_string(),
        check_nav_model(NavModelKind::RConcat, 205)?,
    );
    out.insert(
        "ga".to_string(),
        check_nav_model(NavModelKind::GatedAttention, 206)?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_tolerance() {
        let results = run_gradcheck_suite().unwrap();
        assert_eq!(results.len(), 10);
        for (op, err) in &results {
            assert!(
                *err < GRADCHECK_TOLERANCE,
                "{op}: max rel err {err} >= {GRADCHECK_TOLERANCE}"
            );
        }
    }
}
