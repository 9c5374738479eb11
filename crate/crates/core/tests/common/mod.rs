//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use posattn::attention::{self, AttentionParams, Mask};
use posattn::model::Dropout;
use posattn::positional::RelativeTable;
use posattn::{Graph, ModelConfig, ParamStore, Result, Seq2SeqModel, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Build = Box<dyn for<'a> Fn(&mut Graph<'a, f64>, &'a ParamStore<f64>, &[Var]) -> Result<Var>>;

/// One differentiable operation under test: leaf input shapes, an
/// optional parameter store, and the forward builder.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    pub store: fn(&mut ChaCha8Rng) -> ParamStore<f64>,
    pub build: Build,
}

fn no_store(_: &mut ChaCha8Rng) -> ParamStore<f64> {
    ParamStore::new()
}

fn attn_store(rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    AttentionParams::new(&mut s, rng, "a", 8, 2).unwrap();
    RelativeTable::new(&mut s, rng, 8, 4);
    s
}

fn attn(store: &ParamStore<f64>) -> (AttentionParams, RelativeTable) {
    let p = AttentionParams::find(store, "a", 2).unwrap();
    let rel = RelativeTable::from_param(store, store.find("rel").unwrap()).unwrap();
    (p, rel)
}

fn case(
    name: &'static str,
    inputs: &[&[usize]],
    build: impl for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
        store: no_store,
        build: Box::new(move |g, _, x| build(g, x)),
    }
}

fn attn_case(
    name: &'static str,
    inputs: &[&[usize]],
    build: impl for<'a> Fn(&mut Graph<'a, f64>, &'a ParamStore<f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
        store: attn_store,
        build: Box::new(build),
    }
}

/// Every differentiable graph operation plus the composed attention
/// variants.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |g, x| g.matmul(x[0], x[1])),
        case("matmul_t(a^T b)", &[&[4, 3], &[4, 5]], |g, x| g.matmul_t(x[0], x[1], true, false)),
        case("matmul_t(a b^T)", &[&[3, 4], &[5, 4]], |g, x| g.matmul_t(x[0], x[1], false, true)),
        case("matmul_t(a^T b^T)", &[&[4, 3], &[5, 4]], |g, x| g.matmul_t(x[0], x[1], true, true)),
        case("batched matmul", &[&[2, 3, 4], &[2, 4, 3]], |g, x| g.matmul(x[0], x[1])),
        case("batched matmul shared rhs", &[&[2, 3, 4], &[4, 5]], |g, x| g.matmul(x[0], x[1])),
        case("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1])),
        case("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        case("add_row", &[&[3, 4], &[4]], |g, x| g.add_row(x[0], x[1])),
        case("scale", &[&[3, 4]], |g, x| Ok(g.scale(x[0], -1.7))),
        case("relu", &[&[4, 5]], |g, x| Ok(g.relu(x[0]))),
        case("sum", &[&[3, 4]], |g, x| Ok(g.sum(x[0]))),
        case("mean", &[&[3, 4]], |g, x| Ok(g.mean(x[0]))),
        case("reshape", &[&[3, 4]], |g, x| {
            let r = g.reshape(x[0], &[2, 6])?;
            let w = g.constant(&[6, 2], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect());
            g.matmul(r, w)
        }),
        case("slice_rows", &[&[5, 3]], |g, x| g.slice_rows(x[0], 1, 3)),
        case("softmax last axis", &[&[3, 5]], |g, x| g.softmax(x[0], 1)),
        case("softmax middle axis", &[&[2, 3, 4]], |g, x| g.softmax(x[0], 1)),
        case("masked_softmax", &[&[2, 3, 4]], |g, x| {
            let m: Vec<bool> = (0..12).map(|i| i % 4 == 3 || i == 5).collect();
            g.masked_softmax(x[0], &Arc::new(m))
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
        case("embedding", &[&[6, 3]], |g, x| g.embedding(x[0], &[2, 0, 2, 5])),
        case("split_heads", &[&[3, 8]], |g, x| g.split_heads(x[0], 2)),
        case("merge_heads", &[&[2, 3, 4]], |g, x| g.merge_heads(x[0])),
        case("relative_logits", &[&[2, 3, 4], &[11, 4]], |g, x| g.relative_logits(x[0], x[1], 0, 4)),
        case("relative_logits offset", &[&[2, 1, 4], &[11, 4]], |g, x| g.relative_logits(x[0], x[1], 3, 4)),
        case("dropout", &[&[4, 5]], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            Ok(g.dropout(x[0], 0.3, &mut rng))
        }),
        case("label_smoothed_nll", &[&[4, 6]], |g, x| g.label_smoothed_nll(x[0], &[1, 0, 5, 2], 0.1, Some(0))),
        case("nll unsmoothed", &[&[3, 6]], |g, x| g.label_smoothed_nll(x[0], &[1, 4, 2], 0.0, None)),
        attn_case("attend_vanilla", &[&[5, 8]], |g, s, x| {
            let (p, _) = attn(s);
            let b = s.bind(g);
            attention::attend_vanilla(g, &b, &p, x[0], x[0], &Mask::causal())
        }),
        attn_case("attend_pos_self", &[&[5, 8], &[6, 8]], |g, s, x| {
            let (p, _) = attn(s);
            let b = s.bind(g);
            attention::attend_pos_self(g, &b, &p, x[0], x[1], &Mask::none())
        }),
        attn_case("attend_pos_cross", &[&[3, 8], &[5, 8], &[3, 8], &[5, 8]], |g, s, x| {
            let (p, _) = attn(s);
            let b = s.bind(g);
            attention::attend_pos_cross(g, &b, &p, x[0], x[1], x[2], x[3], &Mask::none())
        }),
        attn_case("attend_rel_self", &[&[5, 8]], |g, s, x| {
            let (p, rel) = attn(s);
            let b = s.bind(g);
            let r = b[rel.param()];
            attention::attend_rel_self(g, &b, &p, x[0], (&rel, r), &Mask::causal())
        }),
        attn_case("attend_pos_rel_self", &[&[5, 8], &[5, 8]], |g, s, x| {
            let (p, rel) = attn(s);
            let b = s.bind(g);
            let r = b[rel.param()];
            attention::attend_pos_rel_self(g, &b, &p, x[0], x[1], (&rel, r), &Mask::none())
        }),
    ]
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        // keep clear of the relu kink
        if v.abs() < 0.05 {
            v + 0.1f64.copysign(v)
        } else {
            v
        }
    })
}

/// Scalar loss `Σ out ⊙ W` for a fixed random weighting `W`.
fn weighted_loss<'a>(g: &mut Graph<'a, f64>, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(&shape, weights[..shape.iter().product::<usize>()].to_vec());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let denom = norm(analytic).max(norm(numeric));
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// Worst per-tensor relative error of reverse-mode gradients against
/// central differences, over leaf inputs and store parameters.
pub fn check_case(c: &GradCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = (c.store)(&mut rng);
    let mut inputs: Vec<Tensor<f64>> = c.inputs.iter().map(|s| normal(&mut rng, s)).collect();
    let weights: Vec<f64> = (0..4096).map(|_| rng.sample(StandardNormal)).collect();

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf_owned(t.clone())).collect();
        let out = (c.build)(&mut g, store, &vars).unwrap();
        let loss = weighted_loss(&mut g, out, &weights).unwrap();
        g.scalar(loss)
    };

    let (leaf_grads, param_grads) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf_owned(t.clone().with_grad())).collect();
        let out = (c.build)(&mut g, &store, &vars).unwrap();
        let loss = weighted_loss(&mut g, out, &weights).unwrap();
        g.backward(loss).unwrap();
        let leaves: Vec<Vec<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        let mut params: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        for (id, gr) in g.param_grads() {
            for (a, &b) in params[id.index()].iter_mut().zip(gr) {
                *a += b;
            }
        }
        (leaves, params)
    };

    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].numel()];
        for k in 0..numeric.len() {
            let x0 = inputs[i].data()[k];
            inputs[i].data_mut()[k] = x0 + FD_STEP;
            let up = eval(&store, &inputs);
            inputs[i].data_mut()[k] = x0 - FD_STEP;
            let down = eval(&store, &inputs);
            inputs[i].data_mut()[k] = x0;
            numeric[k] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&leaf_grads[i], &numeric));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let mut numeric = vec![0.0; n];
        for k in 0..n {
            let x0 = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = x0 + FD_STEP;
            let up = eval(&store, &inputs);
            store.get_mut(id).data_mut()[k] = x0 - FD_STEP;
            let down = eval(&store, &inputs);
            store.get_mut(id).data_mut()[k] = x0;
            numeric[k] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&param_grads[id.index()], &numeric));
    }
    worst
}

/// The 2+2-layer, D=64 desk model with every position flag on.
pub fn desk_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        max_len: 16,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of the whole teacher-forced loss against every
/// parameter tensor, on `per_tensor` sampled coordinates each.
pub fn check_model(seed: u64, per_tensor: usize) -> (f64, String) {
    let cfg = desk_model_config(20);
    let mut model = Seq2SeqModel::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let src: Vec<usize> = (0..6).map(|_| rng.random_range(4..20)).collect();
    let tgt: Vec<usize> = [2].into_iter().chain((0..5).map(|_| rng.random_range(4..20))).chain([3]).collect();
    let loss_of = |m: &Seq2SeqModel<f64>| m.forward_teacher_forced(&src, &tgt, 0.1, None).unwrap().1;

    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let out = model.forward_graph(&mut g, &b, &src, &tgt, 0.1, None, &mut Dropout::off()).unwrap();
    g.backward(out.loss).unwrap();
    let mut analytic: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    for (id, gr) in g.param_grads() {
        for (a, &x) in analytic[id.index()].iter_mut().zip(gr) {
            *a += x;
        }
    }
    drop(g);

    let ids: Vec<_> = model.params().ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let n = model.params().get(id).numel();
        let name = model.params().name(id).to_string();
        // embedding rows of tokens in the batch; elsewhere uniform
        let coords: Vec<usize> = if name == "embed" {
            let d = model.config().d_model;
            (0..per_tensor).map(|_| src[rng.random_range(0..src.len())] * d + rng.random_range(0..d)).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let mut a = Vec::new();
        let mut num = Vec::new();
        for k in coords {
            let x0 = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = x0 + FD_STEP;
            let up = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[k] = x0 - FD_STEP;
            let down = loss_of(&model);
            model.params_mut().get_mut(id).data_mut()[k] = x0;
            a.push(analytic[id.index()][k]);
            num.push((up - down) / (2.0 * FD_STEP));
        }
        let e = rel_error(&a, &num);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    worst
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tensor_of(g: &Graph<'_, f64>, v: Var) -> Vec<f64> {
    g.value(v).to_vec()
}

/// `S[h, i, j] = q[h, i, :] · R[i + offset − j + L]`, the quadratic oracle.
pub fn naive_relative_logits(q: &Tensor<f64>, table: &Tensor<f64>, offset: usize, n_keys: usize) -> Vec<f64> {
    let (heads, nq, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let l = (table.shape()[0] - 1) / 2;
    let mut out = Vec::with_capacity(heads * nq * n_keys);
    for h in 0..heads {
        for i in 0..nq {
            for j in 0..n_keys {
                let row = (i + offset + l) as isize - j as isize;
                let r = table.row(row as usize);
                let qi = &q.data()[(h * nq + i) * dh..(h * nq + i + 1) * dh];
                out.push(qi.iter().zip(r).map(|(a, b)| a * b).sum());
            }
        }
    }
    out
}

/// Maximum absolute deviation for each reduction identity between the
/// attention variants, over several random draws.
pub fn reduction_identities() -> Vec<(&'static str, f64)> {
    let mut worst = vec![
        ("pos+rel with R=0 == pos-self", 0.0f64),
        ("pos+rel with P=0 == rel-self", 0.0),
        ("pos-self with P=0 == vanilla self", 0.0),
        ("pos-cross with P=0 == vanilla cross", 0.0),
        ("relative_logits == naive oracle", 0.0),
    ];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, heads, n, m, max_len) = (16, 4, 7, 5, 12);
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut store, &mut rng, "a", d, heads).unwrap();
        let rel = RelativeTable::new(&mut store, &mut rng, max_len, d / heads);
        let mut zero_store = store.clone();
        zero_store.get_mut(rel.param()).data_mut().fill(0.0);
        let h = normal(&mut rng, &[n, d]);
        let hs = normal(&mut rng, &[m, d]);
        let pos = normal(&mut rng, &[n, d]);
        let masks = [Mask::none(), Mask::causal()];
        for mask in &masks {
            // R = 0
            let mut g = Graph::new();
            let b = zero_store.bind(&mut g);
            let (hv, pv) = (g.leaf(&h), g.leaf(&pos));
            let r = b[rel.param()];
            let a = attention::attend_pos_rel_self(&mut g, &b, &p, hv, pv, (&rel, r), mask).unwrap();
            let c = attention::attend_pos_self(&mut g, &b, &p, hv, pv, mask).unwrap();
            worst[0].1 = worst[0].1.max(max_abs_diff(&tensor_of(&g, a), &tensor_of(&g, c)));

            // P = 0
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let hv = g.leaf(&h);
            let zero = g.constant(&[n, d], vec![0.0; n * d]);
            let r = b[rel.param()];
            let a = attention::attend_pos_rel_self(&mut g, &b, &p, hv, zero, (&rel, r), mask).unwrap();
            let c = attention::attend_rel_self(&mut g, &b, &p, hv, (&rel, r), mask).unwrap();
            worst[1].1 = worst[1].1.max(max_abs_diff(&tensor_of(&g, a), &tensor_of(&g, c)));
            let a = attention::attend_pos_self(&mut g, &b, &p, hv, zero, mask).unwrap();
            let c = attention::attend_vanilla(&mut g, &b, &p, hv, hv, mask).unwrap();
            worst[2].1 = worst[2].1.max(max_abs_diff(&tensor_of(&g, a), &tensor_of(&g, c)));
        }
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let (ht, hsv) = (g.leaf(&h), g.leaf(&hs));
        let zt = g.constant(&[n, d], vec![0.0; n * d]);
        let zs = g.constant(&[m, d], vec![0.0; m * d]);
        let a = attention::attend_pos_cross(&mut g, &b, &p, ht, hsv, zt, zs, &Mask::none()).unwrap();
        let c = attention::attend_vanilla(&mut g, &b, &p, ht, hsv, &Mask::none()).unwrap();
        worst[3].1 = worst[3].1.max(max_abs_diff(&tensor_of(&g, a), &tensor_of(&g, c)));

        let table = store.get(rel.param()).clone();
        for (nq, offset, keys) in [(n, 0, n), (1, 6, 7), (3, 2, 5), (max_len, 0, max_len), (2, 0, 9)] {
            let q = normal(&mut rng, &[heads, nq, d / heads]);
            let mut g = Graph::new();
            let (qv, tv) = (g.leaf(&q), g.leaf(&table));
            let fast = g.relative_logits(qv, tv, offset, keys).unwrap();
            let naive = naive_relative_logits(&q, &table, offset, keys);
            worst[4].1 = worst[4].1.max(max_abs_diff(&tensor_of(&g, fast), &naive));
        }
    }
    worst
}

/// Parameter counts at the base configuration (D=512, 8 heads, max_len
/// 512) for vanilla, each absolute-position flag alone, and rel_self.
pub fn parameter_counts() -> Vec<(String, usize)> {
    use posattn::AttentionFlags;
    let base = ModelConfig {
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_model: 512,
        ffn_dim: 2048,
        n_heads: 8,
        max_len: 512,
        vocab_size: 100,
        ..ModelConfig::default()
    };
    let mut rows = Vec::new();
    for flags in ["none", "pos_self_src", "pos_self_tgt", "pos_cross", "pos_self_src,pos_self_tgt,pos_cross", "rel_self", "full"] {
        let cfg = ModelConfig {
            flags: flags.parse::<AttentionFlags>().unwrap(),
            ..base.clone()
        };
        rows.push((flags.to_string(), Seq2SeqModel::<f32>::new(cfg, 0).unwrap().num_params()));
    }
    rows
}

pub fn synthetic_documents(n: usize, seed: u64) -> (posattn::pipeline::Vocab, Vec<posattn::pipeline::Document>) {
    use posattn::pipeline::{corpus, synthetic, Vocab};
    let docs = synthetic::generate(&synthetic::SynthConfig {
        docs: n,
        doc_sents: (1, 40),
        seed,
        ..Default::default()
    })
    .unwrap();
    let vocab = Vocab::build(corpus::all_sentences(&docs), 1, 64).unwrap();
    let enc = corpus::encode_documents(&docs, &vocab).unwrap();
    (vocab, enc)
}

/// Splitting conserves sentences, serialization round-trips through
/// alignment recovery, and references have full coverage.
pub fn pipeline_round_trip(n_docs: usize) -> std::result::Result<String, String> {
    use posattn::pipeline::{coverage_stats, make_doc2doc, recover_alignment, serialized_len, split_subdocuments};
    let (vocab, docs) = synthetic_documents(n_docs, 11);
    let n_sep = vocab.n_separators();
    let mut pieces_total = 0;
    for max_tokens in [64, 128, 256, 384, 512] {
        let mut pieces = Vec::new();
        for doc in &docs {
            let split = split_subdocuments(doc, max_tokens, n_sep);
            let src: Vec<_> = split.iter().flat_map(|p| p.src.clone()).collect();
            let tgt: Vec<_> = split.iter().flat_map(|p| p.tgt.clone().unwrap()).collect();
            if src != doc.src || Some(&tgt) != doc.tgt.as_ref() {
                return Err(format!("{} at {max_tokens}: sentences not conserved", doc.doc_id));
            }
            let mut offset = doc.offset;
            for p in &split {
                if p.offset != offset {
                    return Err(format!("{} at {max_tokens}: offset {} != {offset}", doc.doc_id, p.offset));
                }
                offset += p.len();
                let fits = serialized_len(&p.src) <= max_tokens && serialized_len(p.tgt.as_ref().unwrap()) <= max_tokens;
                if !fits && p.len() > 1 {
                    return Err(format!("{} at {max_tokens}: multi-sentence piece too long", doc.doc_id));
                }
            }
            pieces.extend(split);
        }
        let mut hyps = Vec::new();
        for p in &pieces {
            let inst = make_doc2doc(p, n_sep).map_err(|e| e.to_string())?;
            let hyp = inst.tgt[1..].to_vec();
            let a = recover_alignment(p.len(), &hyp, n_sep);
            let expect: Vec<Option<Vec<usize>>> = p.tgt.clone().unwrap().into_iter().map(Some).collect();
            if a.malformed || a.segments != expect {
                return Err(format!("{}+{}: alignment is not the identity", p.doc_id, p.offset));
            }
            let src_side = recover_alignment(p.len(), &inst.src, n_sep);
            if src_side.segments != p.src.iter().cloned().map(Some).collect::<Vec<_>>() {
                return Err(format!("{}+{}: source alignment is not the identity", p.doc_id, p.offset));
            }
            hyps.push(hyp);
        }
        let cov = coverage_stats(&pieces, &hyps, n_sep).map_err(|e| e.to_string())?;
        if cov.correct != cov.total {
            return Err(format!("coverage {cov} at {max_tokens}"));
        }
        pieces_total += pieces.len();
    }
    Ok(format!("{n_docs} documents, {pieces_total} pieces over 5 lengths"))
}

/// Hand-counted BLEU cases: segment pairs, then the expected corpus score
/// written out from clipped counts and lengths.
pub fn bleu_oracle_cases() -> Vec<(&'static str, Vec<(&'static str, &'static str)>, f64)> {
    let bleu = |p: f64, bp: f64| 100.0 * bp * p.powf(0.25);
    vec![
        ("identical", vec![("the cat sat on the mat", "the cat sat on the mat")], 100.0),
        // unigram "the" clipped to 2 of 7; no bigram matches
        ("clipped unigrams", vec![("the the the the the the the", "the cat is on the mat")], 0.0),
        // 6/7 · 5/6 · 4/5 · 3/4 = 3/7, hypothesis longer
        ("extra word", vec![("the cat sat on the mat today", "the cat sat on the mat")], bleu(3.0 / 7.0, 1.0)),
        // perfect precision, 5 vs 6 tokens
        ("brevity", vec![("the cat sat on the", "the cat sat on the mat")], bleu(1.0, (-0.2f64).exp())),
        // corpus sums: matches 7,4,2,1 over 8,6,4,2
        ("corpus aggregation", vec![("a b c d", "a b c d"), ("a b x d", "a b c d")], bleu(7.0 / 48.0, 1.0)),
        ("no four-grams", vec![("a b c", "a b c")], 0.0),
        ("reversed order", vec![("d c b a", "a b c d")], 0.0),
        // 4/6 · 3/5 · 2/4 · 1/3 with repeated n-grams clipped
        ("repeated n-grams", vec![("a b a b a b", "a b a b")], bleu(1.0 / 15.0, 1.0)),
        ("half length", vec![("a b c d e", "a b c d e f g h i j")], bleu(1.0, (-1.0f64).exp())),
        // lengths 8 vs 9 summed over segments
        ("corpus brevity", vec![("a b c d", "a b c d e"), ("w x y z", "w x y z")], bleu(1.0, (-0.125f64).exp())),
        ("empty segment", vec![("", "a b"), ("a b c d", "a b c d")], bleu(1.0, (-0.5f64).exp())),
        // 7/8 · 5/7 · 3/6 · 1/5 = 1/16
        ("one substitution", vec![("a b c d e f g h", "a b c d x f g h")], 50.0),
    ]
}

pub fn check_bleu_oracle() -> std::result::Result<usize, String> {
    use posattn::evaluation::corpus_bleu;
    let cases = bleu_oracle_cases();
    for (name, segs, expect) in &cases {
        let pairs: Vec<(Vec<&str>, Vec<&str>)> = segs
            .iter()
            .map(|(h, r)| (h.split_whitespace().collect(), r.split_whitespace().collect()))
            .collect();
        let got = corpus_bleu(&pairs).map_err(|e| e.to_string())?;
        if (got - expect).abs() > 1e-9 {
            return Err(format!("{name}: got {got}, expected {expect}"));
        }
    }
    Ok(cases.len())
}

/// d-BLEU equals s-BLEU when every document is one sentence, and a
/// corpus scored against itself is 100.
pub fn check_bleu_document_identities() -> std::result::Result<(f64, f64), String> {
    use posattn::evaluation::{d_bleu, s_bleu};
    use posattn::pipeline::{make_doc2doc, recover_alignment};
    let (vocab, docs) = synthetic_documents(60, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let singles: Vec<_> = docs
        .iter()
        .flat_map(|d| d.src.iter().zip(d.tgt.clone().unwrap()).take(2).map(|(s, t)| (s.clone(), t)).collect::<Vec<_>>())
        .collect();
    // hypotheses: references with random corruption
    let mut pairs = Vec::new();
    let mut aligns = Vec::new();
    let mut refs = Vec::new();
    for (s, t) in &singles {
        let doc = posattn::pipeline::Document::new("x", vec![s.clone()], Some(vec![t.clone()])).unwrap();
        let inst = make_doc2doc(&doc, 64).unwrap();
        let mut hyp = inst.tgt[1..].to_vec();
        for tok in hyp.iter_mut().filter(|t| !vocab.is_special(**t)) {
            if rng.random::<f64>() < 0.3 {
                *tok = rng.random_range(vocab.first_word()..vocab.len());
            }
        }
        if rng.random::<f64>() < 0.2 {
            hyp.pop();
            hyp.pop();
        }
        aligns.push(recover_alignment(1, &hyp, 64));
        refs.push(vec![t.clone()]);
        pairs.push((hyp, inst.tgt.clone()));
    }
    let d = d_bleu(&pairs, &vocab).map_err(|e| e.to_string())?;
    let s = s_bleu(&aligns, &refs, &vocab).map_err(|e| e.to_string())?;
    if (d - s).abs() > 1e-9 {
        return Err(format!("d-BLEU {d} != s-BLEU {s}"));
    }
    let own: Vec<_> = docs.iter().map(|d| {
        let i = make_doc2doc(d, 64).unwrap();
        (i.tgt.clone(), i.tgt)
    }).collect();
    let selfb = d_bleu(&own, &vocab).map_err(|e| e.to_string())?;
    if (selfb - 100.0).abs() > 1e-9 {
        return Err(format!("self-BLEU {selfb}"));
    }
    Ok((d, selfb))
}

/// Sinusoidal rows for `n_seq` sequences of length `len`, as probe input.
pub fn pe_states(n_seq: usize, len: usize, dim: usize) -> posattn::probing::States {
    let table = posattn::positional::SinusoidalTable::<f32>::new(len, dim).unwrap();
    let mut s = posattn::probing::States {
        dim,
        layer: 0,
        rows: Vec::new(),
        position: Vec::new(),
        sequence: Vec::new(),
        seq_len: Vec::new(),
    };
    for q in 0..n_seq {
        for p in 0..len {
            s.rows.extend_from_slice(table.row(p));
            s.position.push(p);
            s.sequence.push(q);
            s.seq_len.push(len);
        }
    }
    s
}

/// Desk-scale training recipe: 2+2 layers, D=64, short warmup.
pub fn desk_run(vocab: usize) -> posattn::RunConfig {
    let mut run = posattn::RunConfig::default();
    run.seed = 1;
    run.model.vocab_size = vocab;
    run.model.dropout = 0.1;
    run.train.warmup_steps = 200;
    run.train.lr_scale = 0.5;
    run.train.max_tokens = 2048;
    run.train.mix_sent_ratio = Some(0.5);
    run
}

/// Token-mapping corpus of long documents used by the mechanism checks.
pub fn translation_corpus() -> posattn::training::experiment::ExperimentData {
    use posattn::pipeline::{corpus, synthetic, Vocab};
    let docs = synthetic::generate(&synthetic::SynthConfig {
        docs: 400,
        doc_sents: (20, 60),
        ..Default::default()
    })
    .unwrap();
    let vocab = Vocab::build(corpus::all_sentences(&docs), 1, 64).unwrap();
    let enc = corpus::encode_documents(&docs, &vocab).unwrap();
    let (train, valid) = enc.split_at(360);
    posattn::training::experiment::ExperimentData {
        vocab,
        train: train.to_vec(),
        valid: valid.to_vec(),
    }
}
