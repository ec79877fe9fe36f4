use cktwam_core::ckt::{count_params, CktConfig, CktModule, Grouping};
use cktwam_core::harness::{budget_table, checkpoint, eval_invariants, gradcheck, route_stats, Experiment, RunConfig};
use cktwam_core::injection::Observation;
use cktwam_core::tensor::{Faults, Precision};
use cktwam_core::CktError;

fn exp() -> Experiment {
    Experiment::build(RunConfig::desk()).unwrap()
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::desk();
    let mut e = exp();
    let n = e.ckt.params().len();
    for (i, t) in e.ckt.params_mut().tensors_mut().enumerate() {
        for (j, x) in t.data_mut().iter_mut().enumerate() {
            *x = (i * 31 + j) as f64 * 1e-3 - 0.7;
        }
    }
    let a = dir.path().join("a.ckpt");
    checkpoint::save(&a, &cfg, 42, e.ckt.params()).unwrap();

    let mut fresh = CktModule::new(cfg.ckt.clone()).unwrap();
    let header = checkpoint::load(&a, &cfg, fresh.params_mut()).unwrap();
    assert_eq!(header.step, 42);
    assert_eq!(header.tensors.len(), n);
    for id in e.ckt.params().ids() {
        let (x, y) = (e.ckt.params().get(id).data(), fresh.params().get(id).data());
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let b = dir.path().join("b.ckpt");
    checkpoint::save(&b, &cfg, 42, fresh.params()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn checkpoint_layout() {
    let cfg = RunConfig::desk();
    let e = exp();
    let bytes = checkpoint::encode(&cfg, 0, e.ckt.params()).unwrap();
    assert_eq!(&bytes[..8], b"CKTWAM1\n");
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    let tensors = header["tensors"].as_array().unwrap();
    let payload = bytes.len() - 16 - hlen - 8;
    assert_eq!(payload, e.ckt.params().numel() * 8);
    let last = tensors.last().unwrap();
    assert_eq!(
        last["offset"].as_u64().unwrap() + last["nbytes"].as_u64().unwrap(),
        payload as u64
    );
    assert_eq!(header["config"]["ckt"]["M"], 8);
}

#[test]
fn checkpoint_rejects_other_config_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::desk();
    let e = exp();
    let p = dir.path().join("c.ckpt");
    checkpoint::save(&p, &cfg, 0, e.ckt.params()).unwrap();

    let mut other = cfg.clone();
    other.ckt.seed = 99;
    let mut m = CktModule::new(other.ckt.clone()).unwrap();
    let err = checkpoint::load(&p, &other, m.params_mut()).unwrap_err();
    assert!(matches!(err, CktError::Checkpoint(_)), "{err}");

    // Training-only settings may differ.
    let mut lr = cfg.clone();
    lr.training.lr = 0.5;
    let mut m = CktModule::new(cfg.ckt.clone()).unwrap();
    checkpoint::load(&p, &lr, m.params_mut()).unwrap();

    let mut bytes = std::fs::read(&p).unwrap();
    let at = bytes.len() - 20;
    bytes[at] ^= 1;
    let err = checkpoint::decode(&bytes).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert!(checkpoint::decode(b"NOTACKPT0000000000000000").is_err());
}

#[test]
fn paper_budget_table() {
    let (b, text) = budget_table(&CktConfig::paper(), Grouping::PaperTable);
    assert_eq!(b.bank_total, 187_411_465);
    assert!(text.contains("187,411,465"));
    assert!(text.contains("20,531,712"));
    assert!(text.contains("2,626,057"));
    for pct in ["9.37%", "1.34%", "1.17%"] {
        assert!(text.contains(pct), "{pct} missing from\n{text}");
    }
}

#[test]
fn structural_budget_matches_instantiated_desk_module() {
    let cfg = CktConfig::desk();
    let (b, text) = budget_table(&cfg, Grouping::Structural);
    assert_eq!(
        b.p_train as usize,
        CktModule::new(cfg.clone()).unwrap().params().numel()
    );
    assert!(text.contains("separator"));
    assert_eq!(b, count_params(&cfg, Grouping::Structural));
}

#[test]
fn uniform_router_gives_flat_stage_rows() {
    let mut e = exp();
    let ps = e.ckt.params_mut();
    for name in ["router.w2.weight", "router.w2.bias"] {
        let id = ps.find(name).unwrap();
        ps.get_mut(id).data_mut().fill(0.0);
    }
    let obs: Vec<&Observation> = e.task.samples.iter().map(|s| &s.observation).collect();
    let stats = route_stats(&e.teacher, &e.ckt, &obs, Precision::F64).unwrap();
    assert_eq!(stats.rows.len(), 4);
    for r in &stats.rows {
        assert_eq!(r.episodes, 32);
        for p in &r.probs {
            assert!((p - 0.125).abs() < 1e-15);
        }
    }
    let csv = stats.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("stage,episodes,p0,"));
}

#[test]
fn stage_rows_sum_to_one() {
    let e = exp();
    let obs: Vec<&Observation> = e.task.samples.iter().map(|s| &s.observation).collect();
    let stats = route_stats(&e.teacher, &e.ckt, &obs, Precision::F64).unwrap();
    for r in &stats.rows {
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.top2_mass() <= 1.0);
    }
    assert!(stats.to_text().contains("argmax"));
}

#[test]
fn route_stats_requires_stage_labels() {
    let e = exp();
    let mut o = e.task.samples[0].observation.clone();
    o.stage = None;
    let err = route_stats(&e.teacher, &e.ckt, &[&o], Precision::F64).unwrap_err();
    assert!(err.to_string().contains("stage label"), "{err}");
}

#[test]
fn invariants_pass_on_desk_config() {
    let r = eval_invariants(&RunConfig::desk()).unwrap();
    assert!(r.passed(), "{}", r.to_text());
    assert_eq!(r.checks.len(), 5);
}

#[test]
fn invariants_pass_with_empty_context() {
    let mut cfg = RunConfig::desk();
    cfg.ckt.k_g = 0;
    cfg.ckt.k_s = 0;
    let r = eval_invariants(&cfg).unwrap();
    assert!(r.passed(), "{}", r.to_text());
}

#[test]
fn rope_on_cross_attention_fails_order_check() {
    let mut cfg = RunConfig::desk();
    cfg.student.debug_rope_on_cross_attn = true;
    let r = eval_invariants(&cfg).unwrap();
    assert!(!r.get("order_invariance").unwrap().passed, "{}", r.to_text());
    assert!(r.get("rope_bitwise").unwrap().passed);
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let cfg = RunConfig::desk();
    let ok = gradcheck(&cfg, Faults::default(), Some(6)).unwrap();
    assert!(ok.passed, "{}", ok.to_text());
    assert_eq!(
        ok.tensors.len(),
        CktModule::new(cfg.ckt.clone()).unwrap().params().len()
    );
    let again = gradcheck(&cfg, Faults::default(), Some(6)).unwrap();
    assert_eq!(ok.max_rel_err.to_bits(), again.max_rel_err.to_bits());

    let bad = gradcheck(
        &cfg,
        Faults {
            wrong_gelu_backward: true,
        },
        Some(6),
    )
    .unwrap();
    assert!(!bad.passed, "{}", bad.to_text());
}
