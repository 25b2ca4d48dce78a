use msma::intervention::*;
use msma::numeric::rng;
use rand_distr::{Distribution, Normal};

#[test]
fn fdr_keeps_the_single_true_effect() {
    // six metrics, 30 paired runs, only `sentence_count` shifts by +25%
    let names = ["lexical_diversity", "sentence_count", "mean_sentence_length", "sentiment", "coherence", "depth"];
    let mut kept = 0;
    let mut false_hits = 0;
    for seed in 0..100 {
        let mut r = rng(seed);
        let level = Normal::new(10.0, 1.0).unwrap();
        let jitter = Normal::new(0.0, 0.1).unwrap();
        let pairs: Vec<PairedMetric> = names
            .iter()
            .map(|&name| {
                let baseline: Vec<f64> = (0..30).map(|_| level.sample(&mut r)).collect();
                let gain = if name == "sentence_count" { 1.25 } else { 1.0 };
                let intervened = baseline.iter().map(|b| b * gain * (1.0 + jitter.sample(&mut r))).collect();
                PairedMetric { metric: name.into(), baseline, intervened }
            })
            .collect();
        let cfg = EffectConfig { bootstrap_reps: 200, seed, ..EffectConfig::default() };
        let rep = run_effect_study(&pairs, &cfg).unwrap();
        kept += (rep.get("sentence_count").unwrap().adjusted_p < 0.05) as usize;
        false_hits += rep.metrics.iter().filter(|m| m.metric != "sentence_count" && m.adjusted_p < 0.05).count();
    }
    assert!(kept >= 80, "power {kept}/100");
    assert!(false_hits <= 25, "{false_hits} false discoveries over 500 null metrics");
}

#[test]
fn effect_report_is_deterministic() {
    let mut r = rng(3);
    let n = Normal::new(5.0, 1.0).unwrap();
    let pairs = vec![PairedMetric {
        metric: "m".into(),
        baseline: (0..30).map(|_| n.sample(&mut r)).collect(),
        intervened: (0..30).map(|_| n.sample(&mut r)).collect(),
    }];
    let cfg = EffectConfig::default();
    let a = run_effect_study(&pairs, &cfg).unwrap();
    let b = run_effect_study(&pairs, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.to_csv(), b.to_csv());
}
