use super::*;
use crate::data::Layout;
use crate::numerics::{central_difference, max_relative_error, Tape};
use crate::quantizer::QuantMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn columns(t: &Tensor, from: usize, width: usize) -> Tensor {
    let cols = t.shape()[1];
    let data = (0..t.shape()[0])
        .flat_map(|r| t.data()[r * cols + from..r * cols + from + width].to_vec())
        .collect();
    Tensor::new(vec![t.shape()[0], width], data).unwrap()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|l| a.at(&[i, l]) * b.at(&[l, j])).sum();
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

#[test]
fn fusion_matches_weighted_sum_of_convolutions() {
    let mut r = rng(0);
    let out_g = Hypergraph::new_random(6, 3, 1).unwrap();
    let graphs = vec![
        Hypergraph::new_random(6, 2, 2).unwrap(),
        Hypergraph::new_random(6, 4, 3)
            .unwrap()
            .with_weights(vec![0.5, 2.0, 1.0, 3.0])
            .unwrap(),
    ];
    let x = Tensor::randn(&[4, 6, 3], 1.0, &mut r);
    let theta = Tensor::randn(&[3, 3], 1.0, &mut r);
    let tape = Tape::new();
    let (xv, tv) = (tape.constant(x.clone()), tape.constant(theta.clone()));
    let lam = (Coef::Fixed(0.7), Coef::Fixed(-1.3));
    let fused = fuse_hyperedge_features(xv, &out_g, InPhaseSource::PerSample(&graphs), tv, lam)
        .unwrap()
        .value();
    let same = fuse_hyperedge_features(xv, &out_g, InPhaseSource::SameAsOut, tv, lam)
        .unwrap()
        .value();
    let off = fuse_hyperedge_features(xv, &out_g, InPhaseSource::Off, tv, lam)
        .unwrap()
        .value();
    let g_out = out_g.propagation().unwrap();
    for b in 0..4 {
        let frame = Tensor::new(vec![6, 3], x.data()[b * 18..(b + 1) * 18].to_vec()).unwrap();
        let xt = matmul(&frame, &theta);
        let o = matmul(&g_out, &xt);
        let i = matmul(&graphs[b / 2].propagation().unwrap(), &xt);
        for e in 0..18 {
            let expect = 0.7 * o.data()[e] - 1.3 * i.data()[e];
            assert!((fused.data()[b * 18 + e] - expect).abs() < 1e-12);
            assert!((same.data()[b * 18 + e] - (0.7 - 1.3) * o.data()[e]).abs() < 1e-12);
            assert!((off.data()[b * 18 + e] - 0.7 * o.data()[e]).abs() < 1e-12);
        }
    }
    let bad = [Hypergraph::new_random(5, 2, 0).unwrap()];
    assert!(fuse_hyperedge_features(xv, &out_g, InPhaseSource::PerSample(&bad), tv, lam).is_err());
}

struct BlockFixture {
    store: ParamStore,
    block: Block,
    out_graph: Hypergraph,
    coords: Tensor,
    x: Tensor,
}

fn block_fixture(seed: u64, s: usize, t: usize, v: usize, c: usize, gated: bool) -> BlockFixture {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let gate = gated.then(|| TemporalGate::new(&mut store, "g", t, 2, &mut r));
    let block = Block::new(&mut store, "b", c, gate, 0.5, &mut r);
    BlockFixture {
        store,
        block,
        out_graph: Hypergraph::new_random(v, 3, seed).unwrap(),
        coords: Tensor::randn(&[s, t, v, 3], 1.0, &mut r),
        x: Tensor::randn(&[s, t, v, c], 1.0, &mut r),
    }
}

fn run_block<'t>(
    f: &BlockFixture,
    p: &Bound<'t>,
    x: Var<'t>,
    heads: usize,
    mode: AttentionMode,
    terms: ScoreTerms,
) -> Result<Var<'t>> {
    let ctx = BlockContext {
        params: p,
        out_graph: &f.out_graph,
        in_graph: InPhaseSource::SameAsOut,
        coords: &f.coords,
        lambdas: (Coef::Fixed(1.0), Coef::Fixed(0.5)),
        heads,
        mode,
        terms,
        temporal: true,
        persons: 1,
    };
    f.block.forward(&ctx, x)
}

#[test]
fn factorised_bone_scores_match_explicit_offsets() {
    let (v, c, heads) = (5, 6, 3);
    let d = c / heads;
    let f = block_fixture(4, 1, 1, v, c, false);
    let tape = Tape::new();
    let p = f.store.bind(&tape);
    let got = run_block(
        &f,
        &p,
        tape.constant(f.x.clone()),
        heads,
        AttentionMode::Softmax,
        ScoreTerms::default(),
    )
    .unwrap()
    .value();

    let x = f.x.clone().reshaped(&[v, c]).unwrap();
    // block norm at its initial unit gain and zero shift
    let normed: Vec<f64> = (0..v)
        .flat_map(|i| {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
            row.iter()
                .map(move |a| (a - mean) / (var + crate::nn::LAYER_NORM_EPS).sqrt())
                .collect::<Vec<_>>()
        })
        .collect();
    let normed = Tensor::new(vec![v, c], normed).unwrap();
    let xyz = f.coords.clone().reshaped(&[v, 3]).unwrap();
    let w = |id| f.store.get(id).clone();
    let features = fuse_hyperedge_features(
        tape.constant(normed.clone().reshaped(&[1, v, c]).unwrap()),
        &f.out_graph,
        InPhaseSource::SameAsOut,
        tape.constant(w(f.block.theta)),
        (Coef::Fixed(1.0), Coef::Fixed(0.5)),
    )
    .unwrap()
    .value()
    .reshaped(&[v, c])
    .unwrap();
    let (q, k, val) = (
        matmul(&normed, &w(f.block.query)),
        matmul(&normed, &w(f.block.key)),
        matmul(&normed, &w(f.block.value)),
    );
    for h in 0..heads {
        let bone_w = columns(&w(f.block.bone), h * d, d);
        let mut offsets = Vec::new();
        for i in 0..v {
            for j in 0..v {
                let diff: Vec<f64> = (0..3).map(|a| xyz.at(&[i, a]) - xyz.at(&[j, a])).collect();
                offsets.extend(matmul(&Tensor::new(vec![1, 3], diff).unwrap(), &bone_w).into_data());
            }
        }
        let head = attention_head(
            tape.constant(columns(&q, h * d, d)),
            tape.constant(columns(&k, h * d, d)),
            tape.constant(columns(&val, h * d, d)),
            tape.constant(columns(&features, h * d, d)),
            tape.constant(Tensor::new(vec![v, v, d], offsets).unwrap()),
            ScoreTerms::default(),
            AttentionMode::Softmax,
        )
        .unwrap()
        .value();
        for i in 0..v {
            for e in 0..d {
                let expect = head.at(&[i, e]) + x.at(&[i, h * d + e]);
                assert!((got.data()[i * c + h * d + e] - expect).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn literal_mode_rejects_vanishing_row_sums() {
    let mut f = block_fixture(5, 2, 1, 4, 4, false);
    *f.store.get_mut(f.block.query) = Tensor::zeros(&[4, 4]);
    let tape = Tape::new();
    let p = f.store.bind(&tape);
    let err = run_block(
        &f,
        &p,
        tape.constant(f.x.clone()),
        2,
        AttentionMode::Literal,
        ScoreTerms::default(),
    );
    assert!(
        matches!(err, Err(Error::DegenerateAttention { sample: 0, .. })),
        "{:?}",
        err.err()
    );
    // softmax of all-zero scores is uniform and fine
    run_block(
        &f,
        &p,
        tape.constant(f.x.clone()),
        2,
        AttentionMode::Softmax,
        ScoreTerms::default(),
    )
    .unwrap();
}

#[test]
fn literal_rows_sum_to_one() {
    let tape = Tape::new();
    let scores = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, -2.0, 6.0]).unwrap());
    let w = normalize_scores(scores, AttentionMode::Literal, 2).unwrap().value();
    assert_eq!(w.data(), &[0.25, 0.75, -0.5, 1.5]);
}

#[test]
fn temporal_gate_with_zero_parameters_scales_by_one_and_a_half() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let gate = TemporalGate::new(&mut store, "g", 4, 4, &mut r);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::randn(&[2, 4, 3, 2], 1.0, &mut r);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = temporal_attention(&p, &gate, tape.constant(x.clone())).unwrap().value();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((1.5 * a - b).abs() < 1e-12);
    }
}

#[test]
fn block_gradients_match_central_differences() {
    let f = block_fixture(7, 2, 4, 4, 4, true);
    for mode in [AttentionMode::Softmax, AttentionMode::Literal] {
        let loss_at = |store: &ParamStore| -> Result<f64> {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let y = run_block(&f, &p, tape.constant(f.x.clone()), 2, mode, ScoreTerms::default())?;
            Ok(y.mul(y)?.mean_all()?.item())
        };
        let tape = Tape::new();
        let p = f.store.bind(&tape);
        let y = run_block(&f, &p, tape.constant(f.x.clone()), 2, mode, ScoreTerms::default()).unwrap();
        let grads = tape.backward(y.mul(y).unwrap().mean_all().unwrap()).unwrap();
        for id in f.store.ids() {
            let analytic = grads.get(p.get(id));
            let numeric = central_difference(
                |w| {
                    let mut s = f.store.clone();
                    s.get_mut(id).data_mut().copy_from_slice(w);
                    loss_at(&s)
                },
                f.store.get(id).data(),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(analytic.data(), &numeric);
            assert!(err < 1e-5, "{mode:?} {} rel err {err}", f.store.name(id));
        }
    }
}

#[test]
fn ablated_score_terms_change_the_output() {
    let f = block_fixture(8, 1, 1, 5, 4, false);
    let tape = Tape::new();
    let p = f.store.bind(&tape);
    let all = run_block(
        &f,
        &p,
        tape.constant(f.x.clone()),
        2,
        AttentionMode::Softmax,
        ScoreTerms::default(),
    )
    .unwrap()
    .value();
    for terms in [
        ScoreTerms {
            joint: false,
            ..Default::default()
        },
        ScoreTerms {
            hyperedge: false,
            ..Default::default()
        },
        ScoreTerms {
            bone: false,
            ..Default::default()
        },
    ] {
        let y = run_block(&f, &p, tape.constant(f.x.clone()), 2, AttentionMode::Softmax, terms)
            .unwrap()
            .value();
        assert!(y.max_abs_diff(&all) > 1e-6);
    }
    let none = ScoreTerms {
        joint: false,
        hyperedge: false,
        bone: false,
    };
    assert!(run_block(&f, &p, tape.constant(f.x.clone()), 2, AttentionMode::Softmax, none).is_err());
}

#[test]
fn frame_pooling_agrees_between_tensor_and_tape() {
    let x = Tensor::randn(&[2, 6, 3, 2], 1.0, &mut rng(9));
    let tape = Tape::new();
    let a = pool_frames(tape.constant(x.clone())).unwrap().value();
    let b = pool_frames_tensor(&x);
    assert_eq!(a.shape(), &[2, 3, 3, 2]);
    assert!(a.max_abs_diff(&b) < 1e-15);
    assert!((b.at(&[1, 2, 0, 1]) - 0.5 * (x.at(&[1, 4, 0, 1]) + x.at(&[1, 5, 0, 1]))).abs() < 1e-15);
}

#[test]
fn config_validation() {
    let ok = EncoderConfig::default();
    ok.validate(64).unwrap();
    assert!(ok.validate(30).is_err());
    assert!(EncoderConfig {
        split: [2, 2],
        ..ok.clone()
    }
    .validate(64)
    .is_err());
    assert!(EncoderConfig { heads: 7, ..ok.clone() }.validate(64).is_err());
    assert!(EncoderConfig {
        pool_after: vec![6],
        ..ok.clone()
    }
    .validate(64)
    .is_err());
    let none = ScoreTerms {
        joint: false,
        hyperedge: false,
        bone: false,
    };
    assert!(EncoderConfig {
        scores: none,
        ..ok.clone()
    }
    .validate(64)
    .is_err());
    assert_eq!(ok.frames_at(64, 0), 64);
    assert_eq!(ok.frames_at(64, 2), 32);
    assert_eq!(ok.frames_at(64, 4), 16);
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        units: 3,
        split: [1, 2],
        hidden: 8,
        heads: 2,
        pool_after: vec![1, 3],
        ..EncoderConfig::default()
    }
}

#[test]
fn encoder_forward_shapes_and_inphase_graphs() {
    let layout = Layout::Chain(5);
    let adjacency = layout.adjacency();
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, small_config(), 3, 8, &mut r).unwrap();
    let quant = InPhaseQuantizer::new(&mut store, &[8, 6, 4, 6, 3], 2, 3, &mut r);
    let coords = Tensor::randn(&[3, 8, 5, 3], 0.5, &mut r);
    let out_graph = Hypergraph::new_random(5, 3, 0).unwrap();
    let input = EncoderInput {
        coords: &coords,
        out_graph: &out_graph,
        adjacency: &adjacency,
        quantizer: &quant,
        store: &store,
        quant_mode: QuantMode::Live,
        persons: 1,
    };
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = enc.forward(&p, &input).unwrap();
    assert_eq!(out.encoded.shape(), vec![3, 2, 5, 8]);
    assert!(out.encoded.value().is_finite());
    let q = out.quantizer.unwrap();
    assert_eq!(q.reconstruction.shape(), vec![3, 5, 3]);
    let graphs = out.inphase.unwrap().graphs;
    assert_eq!(graphs.len(), 3);
    for (s, g) in graphs.iter().enumerate() {
        let expect = &q.quantized.assignments[s * 5..(s + 1) * 5];
        assert_eq!(g.assignment().unwrap(), expect);
    }

    let mut store2 = ParamStore::new();
    let off_config = EncoderConfig {
        inphase: false,
        ..small_config()
    };
    let off = Encoder::new(&mut store2, off_config, 3, 8, &mut rng(10)).unwrap();
    let quant2 = InPhaseQuantizer::new(&mut store2, &[8, 6, 4, 6, 3], 2, 3, &mut r);
    let input2 = EncoderInput {
        quantizer: &quant2,
        store: &store2,
        ..input
    };
    let tape = Tape::new();
    let p = store2.bind(&tape);
    let out = off.forward(&p, &input2).unwrap();
    assert!(out.quantizer.is_none() && out.inphase.is_none());
}

#[test]
fn encoder_is_deterministic_given_seed() {
    let build = || {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, small_config(), 3, 8, &mut rng(11)).unwrap();
        (store, enc)
    };
    let (a, _) = build();
    let (b, _) = build();
    assert_eq!(a, b);
    assert!(a.names().iter().any(|n| n == "unit2.temporal.gate.reduce.weight"));
    assert!(a.find("lambda1").is_none());
}
