//! Finite-difference checks of the composed model forwards and the
//! knowledge-base interface, at unit-test scale (a few seeds; the
//! acceptance suite runs the full sweep).

use ckb_core::gradcheck::{grad_check_with_floor, F32_NOISE_FLOOR};
use ckb_core::interface::{bind_global_interface, InterfaceParams, InterfaceVars};
use ckb_core::kb::{KbConfig, KbVars, KnowledgeBase};
use ckb_core::models::{
    EncoderClassifier, FeedForwardNet, GruClassifier, ModelSignature, SignatureLevel, TextCnn,
};
use ckb_core::rng::SeededRng;
use ckb_core::tape::{Tape, Var};
use ckb_core::tensor::Tensor;

fn mark(mut t: Tensor) -> Tensor {
    t.requires_grad = true;
    t
}

#[test]
fn ffn_forward_passes_grad_check() {
    for seed in 0..3u64 {
        let mut rng = SeededRng::new(20 + seed);
        let net = FeedForwardNet::new(3, 4, 2, &mut rng);
        let x = mark(Tensor::matrix(1, 3, rng.uniform_vec(3, 1.0)).unwrap());
        let target = Tensor::matrix(1, 2, rng.uniform_vec(2, 1.0)).unwrap();
        let mut params = vec![net.w_xh.clone(), net.w_hy.clone(), x];
        let build = move |tape: &mut Tape, vars: &[Var]| {
            let pre = tape.matmul(vars[2], vars[0])?;
            let h = tape.tanh(pre)?;
            let y = tape.matmul(h, vars[1])?;
            let tv = tape.constant(&target);
            tape.cosine_distance(y, tv)
        };
        let err = grad_check_with_floor(&build, &mut params, 1e-3, 12, F32_NOISE_FLOOR, &mut rng)
            .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn gru_unroll_passes_grad_check() {
    // Three steps of the gated unit, gradients through the full unroll.
    for seed in 0..3u64 {
        let mut rng = SeededRng::new(40 + seed);
        let model = GruClassifier::new(8, 3, 4, 2, &mut rng);
        let target = Tensor::matrix(1, 4, rng.uniform_vec(4, 1.0)).unwrap();
        let tokens = vec![1usize, 5, 3];
        let mut params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        params.truncate(10); // embedding + cell, not the head
        let cell = model.cell.clone();
        let d_h = model.d_h;
        let build = move |tape: &mut Tape, vars: &[Var]| {
            let cell_vars = ckb_core::models::GruCellVars {
                w_zx: vars[1],
                w_zh: vars[2],
                b_z: vars[3],
                w_rx: vars[4],
                w_rh: vars[5],
                b_r: vars[6],
                w_cx: vars[7],
                w_ch: vars[8],
                b_c: vars[9],
            };
            let emb = tape.embed(vars[0], &tokens)?;
            let mut h = tape.constant_matrix(1, d_h, vec![0.0; d_h])?;
            for t in 0..tokens.len() {
                let x_t = tape.slice_rows(emb, t, t + 1)?;
                h = cell.step_on(tape, &cell_vars, x_t, h)?;
            }
            let tv = tape.constant(&target);
            tape.cosine_distance(h, tv)
        };
        let err = grad_check_with_floor(&build, &mut params, 1e-3, 8, F32_NOISE_FLOOR, &mut rng)
            .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn cnn_forward_passes_grad_check() {
    for seed in 0..3u64 {
        let mut rng = SeededRng::new(60 + seed);
        let model = TextCnn::new(8, 3, 2, 2, &mut rng);
        let target = Tensor::matrix(1, 6, rng.uniform_vec(6, 1.0)).unwrap();
        let tokens = vec![1usize, 5, 3, 2, 7, 4];
        let mut params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        params.truncate(7); // embedding + banks, not the head
        let banks = model.banks.clone();
        let build = move |tape: &mut Tape, vars: &[Var]| {
            let emb = tape.embed(vars[0], &tokens)?;
            let mut pooled = Vec::new();
            for (i, bank) in banks.iter().enumerate() {
                let windows = tape.unfold_windows(emb, bank.width)?;
                let conv = tape.matmul(windows, vars[1 + 2 * i])?;
                let biased = tape.add_row(conv, vars[2 + 2 * i])?;
                let act = tape.relu(biased)?;
                pooled.push(tape.max_rows(act)?);
            }
            let cat = tape.concat_cols(&pooled)?;
            let tv = tape.constant(&target);
            tape.cosine_distance(cat, tv)
        };
        let err = grad_check_with_floor(&build, &mut params, 1e-3, 8, F32_NOISE_FLOOR, &mut rng)
            .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn encoder_layer_passes_grad_check() {
    for seed in 0..3u64 {
        let mut rng = SeededRng::new(80 + seed);
        let model = EncoderClassifier::new(8, 4, 6, 2, 8, true, &mut rng).unwrap();
        let target = Tensor::matrix(1, 4, rng.uniform_vec(4, 1.0)).unwrap();
        let tokens = vec![1usize, 5, 3];
        let mut params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        params.truncate(18); // everything but the head
        let shell = model.clone();
        let build = move |tape: &mut Tape, vars: &[Var]| {
            let ev = ckb_core::models::EncoderVars {
                embedding: vars[0],
                positional: vars[1],
                w_q: vars[2],
                b_q: vars[3],
                w_k: vars[4],
                b_k: vars[5],
                w_v: vars[6],
                b_v: vars[7],
                w_o: vars[8],
                b_o: vars[9],
                w_ff1: vars[10],
                b_ff1: vars[11],
                w_ff2: vars[12],
                b_ff2: vars[13],
                ln1_g: vars[14],
                ln1_b: vars[15],
                ln2_g: vars[16],
                ln2_b: vars[17],
                head: vars[0], // unused below
            };
            let h = shell.hidden_states_on(tape, &ev, &tokens)?;
            let pooled = tape.mean_rows(h)?;
            let tv = tape.constant(&target);
            tape.cosine_distance(pooled, tv)
        };
        let err = grad_check_with_floor(&build, &mut params, 1e-3, 6, F32_NOISE_FLOOR, &mut rng)
            .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

fn iface_vars_from(vars: &[Var], base: usize) -> InterfaceVars {
    InterfaceVars {
        w_l: vars[base],
        w_h: vars[base + 1],
        w_q1: vars[base + 2],
        w_k1: vars[base + 3],
        w_v1: vars[base + 4],
        w_q2: vars[base + 5],
        w_k2: vars[base + 6],
        w_v2: vars[base + 7],
        w_o: vars[base + 8],
    }
}

#[test]
fn interface_forward_passes_grad_check_for_kb_iface_and_input() {
    for seed in 0..3u64 {
        let mut rng = SeededRng::new(90 + seed);
        let cfg = KbConfig::new(2, 3, 2, 4).unwrap();
        let kb = KnowledgeBase::init(cfg, &mut rng);
        let sig = ModelSignature::new("probe", SignatureLevel::Global, 3, 2).unwrap();
        let iface: InterfaceParams = bind_global_interface(&sig, 4, &mut rng).unwrap();
        let x = mark(Tensor::matrix(2, 3, rng.uniform_vec(6, 1.0)).unwrap());
        let target = Tensor::matrix(2, 2, rng.uniform_vec(4, 1.0)).unwrap();

        let mut params: Vec<Tensor> = kb.params().into_iter().cloned().collect();
        params.extend(iface.params().into_iter().cloned());
        params.push(x);
        let k = cfg.k;
        let shell = iface.clone();
        let build = move |tape: &mut Tape, vars: &[Var]| {
            let kb_vars = KbVars {
                high: vars[0],
                low: vars[1..1 + k].to_vec(),
            };
            let ivars = iface_vars_from(vars, 1 + k);
            let xv = vars[1 + k + 9];
            let y = shell.forward_on(tape, &ivars, &kb_vars, xv)?;
            let tv = tape.constant(&target);
            tape.cosine_distance(y, tv)
        };
        let err = grad_check_with_floor(&build, &mut params, 1e-3, 5, F32_NOISE_FLOOR, &mut rng)
            .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}
