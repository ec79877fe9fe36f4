mod common;

use cktwam_core::ckt::{count_params, Branch, CktConfig, CktModule, Grouping};
use cktwam_core::tensor::{ParamSet, Precision, Tape, Tensor, Var};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn teacher_states(cfg: &CktConfig, b: usize, n: usize, seed: u64) -> Tensor {
    Tensor::randn(&[b, n, cfg.d_tea], 1.0, &mut rng(seed))
}

fn param<'a>(set: &'a ParamSet, name: &str) -> &'a [f64] {
    set.get(set.find(name).unwrap_or_else(|| panic!("no param {name}")))
        .data()
}

fn set_param(m: &mut CktModule, name: &str, f: impl Fn(usize) -> f64) {
    let id = m.params().find(name).unwrap();
    let t = m.params_mut().get_mut(id);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn randomize(m: &mut CktModule, name: &str, std: f64, seed: u64) {
    let id = m.params().find(name).unwrap();
    let shape = m.params().get(id).shape().to_vec();
    let t = Tensor::randn(&shape, std, &mut rng(seed));
    m.params_mut().assign(id, t.data()).unwrap();
}

#[test]
fn paper_table_counts() {
    let b = count_params(&CktConfig::paper(), Grouping::PaperTable);
    assert_eq!(b.branch.down_proj, 2_621_952);
    assert_eq!(b.branch.up_proj, 1_050_624);
    assert_eq!(b.branch.trunk_norm, 4_096);
    assert_eq!(b.branch.queries, 65_536);
    assert_eq!(b.branch.attention, 16_785_408);
    assert_eq!(b.branch.post_norm, 4_096);
    assert_eq!(b.branch.total, 20_531_712);
    assert_eq!(b.router, 2_626_057);
    assert_eq!(b.bank_total, 187_411_465);
    assert!(b.p_active < b.p_train);
    assert_eq!(b.p_active, 3 * 20_531_712 + 2_626_057);
}

#[test]
fn structural_count_matches_instantiated_tensors() {
    for cfg in [
        CktConfig::desk(),
        CktConfig {
            k_g: 3,
            k_s: 5,
            r_g: 2,
            r_s: 6,
            experts: 5,
            d_gate: 7,
            ..CktConfig::desk()
        },
    ] {
        let m = CktModule::new(cfg.clone()).unwrap();
        let b = count_params(&cfg, Grouping::Structural);
        assert_eq!(b.p_train as usize, m.params().numel());
        let expert_numel: usize = m.expert_ids(0).iter().map(|&id| m.params().get(id).numel()).sum();
        assert_eq!(b.per_expert as usize, expert_numel);
        assert!(m.params().iter().all(|(_, t)| t.requires_grad));
    }
}

#[test]
fn zero_trunk_gives_zero_context_features() {
    let cfg = CktConfig::desk();
    let mut m = CktModule::new(cfg.clone()).unwrap();
    set_param(&mut m, "trunk.down.weight", |_| 0.0);
    let h = teacher_states(&cfg, 2, 5, 1);
    let mut tape = Tape::new(Precision::F64);
    let b = m.bind(&mut tape);
    let hv = tape.leaf(&h);
    let z = m.shared_project(&mut tape, &b, hv, false).unwrap();
    assert!(tape.value(z).iter().all(|&v| v == 0.0));
}

#[test]
fn shared_project_matches_composition() {
    let cfg = CktConfig::desk();
    let mut m = CktModule::new(cfg.clone()).unwrap();
    randomize(&mut m, "trunk.up.bias", 0.3, 2);
    randomize(&mut m, "trunk.norm.gamma", 1.0, 3);
    randomize(&mut m, "trunk.norm.beta", 0.5, 4);
    let h = teacher_states(&cfg, 1, 2, 5);
    let run = || {
        let mut tape = Tape::new(Precision::F64);
        let b = m.bind(&mut tape);
        let hv = tape.leaf(&h);
        let z = m.shared_project(&mut tape, &b, hv, false).unwrap();
        tape.to_tensor(z)
    };
    let (z1, z2) = (run(), run());
    assert_eq!(z1.data(), z2.data());

    let p = m.params();
    let x = rows(h.data(), cfg.d_tea);
    let x = affine(&x, param(p, "trunk.down.weight"), Some(param(p, "trunk.down.bias")));
    let x = map(&x, gelu);
    let x = affine(&x, param(p, "trunk.up.weight"), Some(param(p, "trunk.up.bias")));
    let x = layer_norm(&x, param(p, "trunk.norm.gamma"), param(p, "trunk.norm.beta"), 1e-5);
    let diff = z1
        .data()
        .iter()
        .zip(flat(&x))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "diff {diff}");
}

#[test]
fn train_mode_trunk_applies_dropout() {
    let cfg = CktConfig {
        dropout: 0.5,
        ..CktConfig::desk()
    };
    let m = CktModule::new(cfg.clone()).unwrap();
    let h = teacher_states(&cfg, 1, 4, 6);
    let mut tape = Tape::new(Precision::F64).with_stream(9, 0);
    let b = m.bind(&mut tape);
    let hv = tape.leaf(&h);
    let z = m.shared_project(&mut tape, &b, hv, true).unwrap();
    let zeros = tape.value(z).iter().filter(|&&v| v == 0.0).count();
    assert!(zeros > 0 && zeros < tape.value(z).len());
}

fn compress_once(m: &CktModule, z: &Tensor, branch: Branch) -> Tensor {
    let mut tape = Tape::new(Precision::F64);
    let b = m.bind(&mut tape);
    let zv = tape.leaf(z);
    let c = m.compress(&mut tape, &b, zv, branch).unwrap();
    tape.to_tensor(c)
}

#[test]
fn compressor_token_count_is_fixed() {
    let cfg = CktConfig {
        k_g: 3,
        k_s: 5,
        ..CktConfig::desk()
    };
    let m = CktModule::new(cfg.clone()).unwrap();
    for n in [1, 4, 17] {
        let z = Tensor::randn(&[2, n, cfg.d_stu], 1.0, &mut rng(n as u64));
        assert_eq!(compress_once(&m, &z, Branch::General).shape(), &[2, 3, cfg.d_stu]);
        assert_eq!(compress_once(&m, &z, Branch::Specialized).shape(), &[2, 5, cfg.d_stu]);
    }
}

#[test]
fn compressor_matches_attention_loop() {
    let cfg = CktConfig {
        k_g: 2,
        ..CktConfig::desk()
    };
    let mut m = CktModule::new(cfg.clone()).unwrap();
    for (i, n) in ["q", "k", "v", "o"].iter().enumerate() {
        randomize(&mut m, &format!("compressor.{n}.weight"), 0.3, 10 + i as u64);
        randomize(&mut m, &format!("compressor.{n}.bias"), 0.1, 20 + i as u64);
    }
    randomize(&mut m, "queries.general", 1.0, 30);
    let z = Tensor::randn(&[1, 3, cfg.d_stu], 1.0, &mut rng(31));
    let got = compress_once(&m, &z, Branch::General);

    let p = m.params();
    let q = rows(param(p, "queries.general"), cfg.d_stu);
    let a = attention(
        &q,
        &rows(z.data(), cfg.d_stu),
        &AttnWeights::from_set(p, "compressor"),
        cfg.heads,
    );
    let want = layer_norm(
        &add(&a, &q),
        param(p, "compressor.norm.gamma"),
        param(p, "compressor.norm.beta"),
        1e-5,
    );
    let diff = got
        .data()
        .iter()
        .zip(flat(&want))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-10, "diff {diff}");
}

#[test]
fn identical_rows_attend_uniformly() {
    let cfg = CktConfig::desk();
    let m = CktModule::new(cfg.clone()).unwrap();
    let u = Tensor::randn(&[cfg.d_stu], 1.0, &mut rng(40));
    let z = Tensor::new(vec![1, 6, cfg.d_stu], u.data().repeat(6)).unwrap();
    let got = compress_once(&m, &z, Branch::Specialized);
    let p = m.params();
    let w = AttnWeights::from_set(p, "compressor");
    // Attention over identical rows returns the projected value itself.
    let v = affine(&affine(&vec![u.data().to_vec()], w.wv, Some(w.bv)), w.wo, Some(w.bo));
    let q = rows(param(p, "queries.specialized"), cfg.d_stu);
    let pre: Mat = q
        .iter()
        .map(|qi| qi.iter().zip(&v[0]).map(|(a, b)| a + b).collect())
        .collect();
    let want = layer_norm(
        &pre,
        param(p, "compressor.norm.gamma"),
        param(p, "compressor.norm.beta"),
        1e-5,
    );
    let diff = got
        .data()
        .iter()
        .zip(flat(&want))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-10, "diff {diff}");
}

fn adapter_once(m: &CktModule, c: &Tensor) -> Tensor {
    let mut tape = Tape::new(Precision::F64);
    let b = m.bind(&mut tape);
    let cv = tape.leaf(c);
    let out = m.generalized_adapter(&mut tape, &b, cv).unwrap();
    tape.to_tensor(out)
}

#[test]
fn generalized_adapter_starts_as_identity_and_always_runs() {
    let cfg = CktConfig::desk();
    let m = CktModule::new(cfg.clone()).unwrap();
    let c = Tensor::randn(&[2, cfg.k_g, cfg.d_stu], 1.0, &mut rng(50));
    for _ in 0..3 {
        assert_eq!(adapter_once(&m, &c).data(), c.data());
    }
    assert_eq!(m.general_calls(), 3);
}

#[test]
fn rank_one_adapter_matches_scalar_path() {
    let cfg = CktConfig {
        r_g: 1,
        ..CktConfig::desk()
    };
    let mut m = CktModule::new(cfg.clone()).unwrap();
    randomize(&mut m, "general.up", 0.5, 51);
    let c = Tensor::randn(&[1, cfg.k_g, cfg.d_stu], 1.0, &mut rng(52));
    let got = adapter_once(&m, &c);
    let down = param(m.params(), "general.down");
    let up = param(m.params(), "general.up");
    for (r, row) in c.data().chunks(cfg.d_stu).enumerate() {
        let s = gelu(row.iter().zip(down).map(|(a, b)| a * b).sum());
        for j in 0..cfg.d_stu {
            let want = row[j] + s * up[j];
            assert!((got.data()[r * cfg.d_stu + j] - want).abs() < 1e-12);
        }
    }
}

fn route_once(m: &CktModule, h: &Tensor, train: bool, seed: u64) -> cktwam_core::ckt::RoutingRecord {
    let mut tape = Tape::new(Precision::F64);
    let b = m.bind(&mut tape);
    let hv = tape.leaf(h);
    m.route(&mut tape, &b, hv, train, &mut rng(seed)).unwrap().record
}

#[test]
fn zeroed_router_is_uniform_with_low_index_ties() {
    let cfg = CktConfig::desk();
    let mut m = CktModule::new(cfg.clone()).unwrap();
    set_param(&mut m, "router.w2.weight", |_| 0.0);
    let rec = route_once(&m, &teacher_states(&cfg, 3, 5, 60), false, 0);
    for b in 0..3 {
        for e in 0..cfg.experts {
            assert!((rec.prob(b, e) - 1.0 / cfg.experts as f64).abs() < 1e-15);
        }
        assert_eq!(rec.selected[b], vec![0, 1]);
        assert_eq!(rec.renorm[b], vec![0.5, 0.5]);
    }
}

#[test]
fn renormalizes_over_selected() {
    let cfg = CktConfig {
        experts: 3,
        ..CktConfig::desk()
    };
    let mut m = CktModule::new(cfg.clone()).unwrap();
    set_param(&mut m, "router.w1.weight", |_| 0.0);
    let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
    set_param(&mut m, "router.w2.bias", |i| logits[i]);
    let rec = route_once(&m, &teacher_states(&cfg, 1, 4, 61), false, 0);
    assert_eq!(rec.selected[0], vec![0, 1]);
    assert!((rec.renorm[0][0] - 0.625).abs() < 1e-12);
    assert!((rec.renorm[0][1] - 0.375).abs() < 1e-12);
}

#[test]
fn eval_routing_is_repeatable_and_train_routing_is_noisy() {
    let cfg = CktConfig::desk();
    let m = CktModule::new(cfg.clone()).unwrap();
    let h = teacher_states(&cfg, 4, 5, 62);
    assert_eq!(route_once(&m, &h, false, 1), route_once(&m, &h, false, 2));
    assert_ne!(route_once(&m, &h, true, 1).probs, route_once(&m, &h, true, 2).probs);
    assert_eq!(route_once(&m, &h, true, 3), route_once(&m, &h, true, 3));
}

/// Runs route + specialized_mix; returns (mix, C_s^0, record).
fn mix_once(m: &CktModule, h: &Tensor, cs0: &Tensor) -> (Tensor, cktwam_core::ckt::RoutingRecord, Vec<usize>) {
    let mut tape = Tape::new(Precision::F64);
    let b = m.bind(&mut tape);
    let hv = tape.leaf(h);
    let cv = tape.leaf(cs0);
    let r = m.route(&mut tape, &b, hv, false, &mut rng(0)).unwrap();
    let (out, per) = m.specialized_mix(&mut tape, &b, cv, &r).unwrap();
    (tape.to_tensor(out), r.record, per)
}

fn expert_apply(m: &CktModule, e: usize, x: &Mat) -> Mat {
    let [d, u] = m.expert_ids(e);
    let h = map(&affine(x, m.params().get(d).data(), None), gelu);
    add(x, &affine(&h, m.params().get(u).data(), None))
}

fn randomize_experts(m: &mut CktModule, seed: u64) {
    for e in 0..m.config().experts {
        randomize(m, &format!("specialized.{e}.up"), 0.5, seed + e as u64);
    }
    randomize(m, "router.w2.weight", 2.0, seed + 100);
}

#[test]
fn sparse_mix_matches_dense_mask_oracle() {
    let cfg = CktConfig {
        experts: 4,
        top_k: 2,
        ..CktConfig::desk()
    };
    let mut m = CktModule::new(cfg.clone()).unwrap();
    randomize_experts(&mut m, 70);
    let h = teacher_states(&cfg, 2, 5, 71);
    let cs0 = Tensor::randn(&[2, cfg.k_s, cfg.d_stu], 1.0, &mut rng(72));
    let (got, rec, per) = mix_once(&m, &h, &cs0);
    assert_eq!(per, vec![2, 2]);
    let width = cfg.k_s * cfg.d_stu;
    for b in 0..2 {
        let x = rows(&cs0.data()[b * width..(b + 1) * width], cfg.d_stu);
        let mut want = vec![0.0; width];
        for e in 0..cfg.experts {
            let y = flat(&expert_apply(&m, e, &x));
            let gate = rec.selected[b]
                .iter()
                .position(|&s| s == e)
                .map_or(0.0, |j| rec.renorm[b][j]);
            for (w, v) in want.iter_mut().zip(y) {
                *w += gate * v;
            }
        }
        let diff = got.data()[b * width..(b + 1) * width]
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "diff {diff}");
    }
}

#[test]
fn full_selection_is_dense_mixture() {
    let cfg = CktConfig {
        experts: 4,
        top_k: 4,
        ..CktConfig::desk()
    };
    let mut m = CktModule::new(cfg.clone()).unwrap();
    randomize_experts(&mut m, 80);
    let h = teacher_states(&cfg, 2, 5, 81);
    let cs0 = Tensor::randn(&[2, cfg.k_s, cfg.d_stu], 1.0, &mut rng(82));
    let (got, rec, _) = mix_once(&m, &h, &cs0);
    let width = cfg.k_s * cfg.d_stu;
    for b in 0..2 {
        let x = rows(&cs0.data()[b * width..(b + 1) * width], cfg.d_stu);
        let mut want = vec![0.0; width];
        for e in 0..cfg.experts {
            for (w, v) in want.iter_mut().zip(flat(&expert_apply(&m, e, &x))) {
                *w += rec.prob(b, e) * v;
            }
        }
        for (a, w) in got.data()[b * width..(b + 1) * width].iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }
}

#[test]
fn single_selected_zero_adapter_is_identity() {
    let cfg = CktConfig {
        top_k: 1,
        ..CktConfig::desk()
    };
    let m = CktModule::new(cfg.clone()).unwrap();
    let h = teacher_states(&cfg, 3, 5, 90);
    let cs0 = Tensor::randn(&[3, cfg.k_s, cfg.d_stu], 1.0, &mut rng(91));
    let (got, rec, _) = mix_once(&m, &h, &cs0);
    assert!(rec.renorm.iter().all(|r| r == &vec![1.0]));
    assert_eq!(got.data(), cs0.data());
}

#[test]
fn unselected_adapters_never_run() {
    let cfg = CktConfig::desk();
    let mut m = CktModule::new(cfg.clone()).unwrap();
    randomize_experts(&mut m, 100);
    let h = teacher_states(&cfg, 1, 5, 101);
    let cs0 = Tensor::randn(&[1, cfg.k_s, cfg.d_stu], 1.0, &mut rng(102));
    let (_, rec, _) = mix_once(&m, &h, &cs0);
    let calls = m.expert_calls();
    for (e, c) in calls.iter().enumerate() {
        assert_eq!(*c, u64::from(rec.selected[0].contains(&e)));
    }
}

fn build(m: &CktModule, set: &ParamSet, h: &Tensor, train: bool) -> (Tape, Var, cktwam_core::ckt::TransferredContext) {
    let mut tape = Tape::new(Precision::F64);
    let b = set.bind(&mut tape);
    let hv = tape.leaf(h);
    let ctx = m.build_context(&mut tape, &b, hv, train, &mut rng(7)).unwrap();
    (tape, hv, ctx)
}

#[test]
fn build_context_shapes_and_reuse() {
    let cfg = CktConfig {
        k_g: 32,
        k_s: 32,
        ..CktConfig::desk()
    };
    let m = CktModule::new(cfg.clone()).unwrap();
    let h = teacher_states(&cfg, 2, 9, 110);
    let (tape, _, ctx) = build(&m, m.params(), &h, false);
    assert_eq!(tape.shape(ctx.c_a), &[2, 64, cfg.d_stu]);
    assert_eq!(ctx.executed_per_instance, vec![2, 2]);
    assert!(ctx.executed_adapter_count <= 2 * cfg.top_k);
    assert_eq!(m.project_calls(), 1);
    assert_eq!(m.compress_calls(Branch::General), 1);
    assert_eq!(m.compress_calls(Branch::Specialized), 1);
    let (g, s, a) = (tape.value(ctx.c_g), tape.value(ctx.c_s), tape.value(ctx.c_a));
    let w = 32 * cfg.d_stu;
    for b in 0..2 {
        assert_eq!(&a[b * 2 * w..b * 2 * w + w], &g[b * w..(b + 1) * w]);
        assert_eq!(&a[b * 2 * w + w..(b + 1) * 2 * w], &s[b * w..(b + 1) * w]);
    }
}

#[test]
fn empty_query_banks_yield_empty_context() {
    let cfg = CktConfig {
        k_g: 0,
        k_s: 0,
        ..CktConfig::desk()
    };
    let m = CktModule::new(cfg.clone()).unwrap();
    let (tape, _, ctx) = build(&m, m.params(), &teacher_states(&cfg, 2, 3, 111), false);
    assert_eq!(tape.shape(ctx.c_a), &[2, 0, cfg.d_stu]);
}

#[test]
fn context_gradients_match_finite_differences() {
    let cfg = CktConfig {
        d_tea: 6,
        d_stu: 4,
        d_b: 3,
        k_g: 2,
        k_s: 2,
        heads: 2,
        dropout: 0.0,
        r_g: 2,
        r_s: 2,
        experts: 3,
        top_k: 2,
        d_gate: 3,
        seed: 3,
    };
    let mut m = CktModule::new(cfg.clone()).unwrap();
    for e in 0..cfg.experts {
        randomize(&mut m, &format!("specialized.{e}.up"), 0.5, 120 + e as u64);
    }
    randomize(&mut m, "general.up", 0.5, 130);
    randomize(&mut m, "router.w2.weight", 1.0, 131);
    let h = teacher_states(&cfg, 2, 3, 132);
    let names: Vec<String> = m.params().iter().map(|(n, _)| n.to_string()).collect();
    let names: Vec<&str> = names
        .iter()
        .map(String::as_str)
        .filter(|n| *n != "sep" && *n != "router.noise_scale")
        .collect();
    let loss = |set: &ParamSet| {
        let (mut tape, _, ctx) = build(&m, set, &h, false);
        let n: usize = tape.shape(ctx.c_a).iter().product();
        let w: Vec<f64> = (0..n).map(|i| ((i * 5 + 1) % 7) as f64 / 7.0 - 0.4).collect();
        let wv = tape.constant(&tape.shape(ctx.c_a).to_vec(), w).unwrap();
        let p = tape.mul(ctx.c_a, wv).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        let b = set.bind(&mut Tape::new(Precision::F64));
        // Parameters are bound first, so their vars occupy the leading slots.
        let grads = b.vars().iter().map(|&v| g.get(v).map(<[f64]>::to_vec)).collect();
        (tape.value(l)[0], grads)
    };
    let (worst, at) = fd_params(m.params(), &names, loss);
    assert!(worst < 1e-4, "worst rel err {worst} at {at}");
}

#[test]
fn unselected_adapters_get_no_gradient() {
    let cfg = CktConfig::desk();
    let m = CktModule::new(cfg.clone()).unwrap();
    let h = teacher_states(&cfg, 1, 4, 140);
    let (mut tape, _, ctx) = build(&m, m.params(), &h, false);
    let l = tape.sum(ctx.c_a);
    let g = tape.backward(l).unwrap();
    let b = m.params().bind(&mut Tape::new(Precision::F64));
    for e in 0..cfg.experts {
        let [d, u] = m.expert_ids(e);
        let picked = ctx.routing.selected[0].contains(&e);
        assert_eq!(g.get(b[d]).is_some(), picked);
        assert_eq!(g.get(b[u]).is_some(), picked);
    }
}
