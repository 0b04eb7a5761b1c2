//! Independent direct-recurrence oracle for the text encoder, plus its
//! reversal-symmetry and gradient properties.

use relmatch_core::diffcore::{compare_gradients, numeric_gradient, Array, Tape};
use relmatch_core::params::ParamBindings;
use relmatch_core::rng::substream;
use relmatch_core::textenc::{
    encode_on_tape, encode_text, EncodeOptions, GruParams, TextEncoderParams,
};

/// Scripted GRU recurrence over plain slices; no tape involved.
mod oracle {
    use relmatch_core::diffcore::Array;
    use relmatch_core::textenc::{GruParams, TextEncoderParams};

    fn matvec(m: &Array, v: &[f64]) -> Vec<f64> {
        (0..m.shape()[0])
            .map(|i| {
                m.row_slice(i)
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    pub fn gru_step(p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hdim = p.hidden();
        let zx = matvec(&p.w_update, x);
        let zh = matvec(&p.u_update, h);
        let rx = matvec(&p.w_reset, x);
        let rh = matvec(&p.u_reset, h);
        let z: Vec<f64> = (0..hdim)
            .map(|i| sigmoid(zx[i] + zh[i] + p.b_update.data()[i]))
            .collect();
        let r: Vec<f64> = (0..hdim)
            .map(|i| sigmoid(rx[i] + rh[i] + p.b_reset.data()[i]))
            .collect();
        let gated: Vec<f64> = (0..hdim).map(|i| r[i] * h[i]).collect();
        let cx = matvec(&p.w_cand, x);
        let ch = matvec(&p.u_cand, &gated);
        (0..hdim)
            .map(|i| {
                let c = (cx[i] + ch[i] + p.b_cand.data()[i]).tanh();
                (1.0 - z[i]) * h[i] + z[i] * c
            })
            .collect()
    }

    /// Full bi-directional encoding, scripted step by step.
    pub fn encode(params: &TextEncoderParams, token_ids: &[usize]) -> Vec<Vec<f64>> {
        let hdim = params.hidden();
        let xs: Vec<Vec<f64>> = token_ids
            .iter()
            .map(|&id| params.embed.row_slice(id).to_vec())
            .collect();

        let mut fwd = Vec::new();
        let mut h = vec![0.0; hdim];
        for x in &xs {
            h = gru_step(&params.forward, x, &h);
            fwd.push(h.clone());
        }
        let mut bwd_rev = Vec::new();
        let mut h = vec![0.0; hdim];
        for x in xs.iter().rev() {
            h = gru_step(&params.backward, x, &h);
            bwd_rev.push(h.clone());
        }
        let n = xs.len();
        (0..n)
            .map(|i| {
                (0..hdim)
                    .map(|j| 0.5 * (fwd[i][j] + bwd_rev[n - 1 - i][j]))
                    .collect()
            })
            .collect()
    }
}

#[test]
fn three_token_sequence_matches_scripted_recurrence() {
    let mut rng = substream(21, "textenc-oracle");
    let params = TextEncoderParams::init(12, 6, 5, &mut rng);
    let tokens = [4usize, 9, 4];

    let encoded = encode_text(&tokens, &params, 7, EncodeOptions::default()).unwrap();
    let expected = oracle::encode(&params, &tokens);

    assert_eq!(encoded.words.shape(), &[3, 5]);
    for i in 0..3 {
        for j in 0..5 {
            assert!(
                (encoded.words.at(i, j) - expected[i][j]).abs() < 1e-10,
                "word {i} dim {j}"
            );
        }
    }
}

#[test]
fn output_shape_is_n_by_h_for_every_length() {
    let mut rng = substream(22, "shapes");
    let params = TextEncoderParams::init(10, 4, 6, &mut rng);
    for n in 1..=8 {
        let tokens: Vec<usize> = (0..n).map(|i| 4 + (i % 6)).collect();
        let enc = encode_text(&tokens, &params, n as u64, EncodeOptions::default()).unwrap();
        assert_eq!(enc.words.shape(), &[n, 6]);
        assert!(enc.words.all_finite());
    }
}

#[test]
fn reversal_with_swapped_directions_reverses_rows_exactly() {
    let mut rng = substream(23, "reversal");
    let params = TextEncoderParams::init(10, 4, 3, &mut rng);
    let swapped = TextEncoderParams {
        embed: params.embed.clone(),
        forward: params.backward.clone(),
        backward: params.forward.clone(),
    };
    let tokens = [5usize, 6, 7, 8];
    let reversed: Vec<usize> = tokens.iter().rev().copied().collect();

    let enc = encode_text(&tokens, &params, 0, EncodeOptions::default()).unwrap();
    let enc_rev = encode_text(&reversed, &swapped, 0, EncodeOptions::default()).unwrap();

    let n = tokens.len();
    for i in 0..n {
        assert_eq!(
            enc.words.row_slice(i),
            enc_rev.words.row_slice(n - 1 - i),
            "row {i} must equal reversed row exactly"
        );
    }
}

#[test]
fn token_out_of_range_is_an_error() {
    let mut rng = substream(24, "oob");
    let params = TextEncoderParams::init(6, 3, 2, &mut rng);
    let err = encode_text(&[6], &params, 0, EncodeOptions::default()).unwrap_err();
    assert!(matches!(
        err,
        relmatch_core::Error::TokenOutOfRange { index: 6, size: 6 }
    ));
}

#[test]
fn encoder_gradients_pass_finite_difference_check() {
    let mut rng = substream(25, "textenc-grad");
    let params = TextEncoderParams::init(8, 4, 3, &mut rng);
    let tokens = [4usize, 5, 4];
    // weight the output so every coordinate matters
    let weights = Array::uniform(&[3, 3], -1.0, 1.0, &mut rng);

    // analytic gradients through the tape
    let run = |p: &TextEncoderParams| -> relmatch_core::Result<(f64, ParamBindings, Tape)> {
        let mut tape = Tape::new();
        let mut reg = ParamBindings::new();
        let nodes = p.bind(&mut tape, &mut reg, "textenc");
        let words = encode_on_tape(&mut tape, &nodes, &tokens)?;
        let stacked = tape.stack_rows(&words)?;
        let w = tape.constant(weights.clone());
        let weighted = tape.mul(stacked, w)?;
        let loss = tape.sum(weighted)?;
        let value = tape.value(loss).scalar_value();
        tape.backward(loss)?;
        Ok((value, reg, tape))
    };

    let (_, reg, tape) = run(&params).unwrap();
    let named = params.named("textenc");
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let flat_params: Vec<Array> = named.iter().map(|(_, a)| (*a).clone()).collect();
    let grads_by_name = reg.gradients(&tape);
    let analytic: Vec<Array> = names.iter().map(|n| grads_by_name[n].clone()).collect();

    let numeric = numeric_gradient(
        |ps| {
            let mut rebuilt = params.clone();
            for ((_, slot), value) in rebuilt.named_mut("textenc").into_iter().zip(ps) {
                *slot = value.clone();
            }
            let (value, _, _) = run(&rebuilt)?;
            Ok(value)
        },
        &flat_params,
        1e-5,
    )
    .unwrap();

    let report = compare_gradients(&analytic, &numeric, 1e-4);
    assert!(report.passed(), "{report}");
}
