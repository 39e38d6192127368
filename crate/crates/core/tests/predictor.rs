use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use infersim::ground_truth::{ground_truth_slowdown, GroundTruthParams};
use infersim::metrics::percentile;
use infersim::model::PriorityLevel;
use infersim::predictor::{FeedbackSample, Predictor, PredictorParams};
use infersim::profile::builtin_profile_set;

fn sample_stream(truth: &GroundTruthParams, n: usize, seed: u64) -> Vec<FeedbackSample> {
    let profiles = builtin_profile_set();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let p = profiles.get(rng.random_range(0..profiles.len()));
            let size = rng.random_range(1..=p.max_batch_size);
            let mut agg = vec![0.0; profiles.metric_count()];
            for _ in 0..rng.random_range(0..=3) {
                let q = profiles.get(rng.random_range(0..profiles.len()));
                let qs = rng.random_range(1..=q.max_batch_size);
                for (a, t) in agg.iter_mut().zip(q.throughput(qs)) {
                    *a += t;
                }
            }
            let noise = truth.draw_noise(&mut rng);
            FeedbackSample {
                batch_id: id as u64,
                intf_actual: ground_truth_slowdown(&agg, p.self_cmp(size), p.self_mem(size), p.priority, noise, truth),
                m_avg_twa: agg,
                m_self_cmp: p.self_cmp(size),
                m_self_mem: p.self_mem(size),
                priority: p.priority,
                intf_predicted: 0.0,
            }
        })
        .collect()
}

#[test]
fn noiseless_truth_learned_within_five_thousand_updates() {
    let mut truth = GroundTruthParams::default();
    truth.sigma = 0.0;
    for seed in 0..3 {
        let mut pred = Predictor::initial(5);
        let errors: Vec<f64> = sample_stream(&truth, 5000, seed)
            .iter()
            .map(|s| {
                let out = pred.update(s).unwrap();
                ((out.prediction - s.intf_actual) / s.intf_actual).abs()
            })
            .collect();
        let median = percentile(&errors[4000..], 50.0).unwrap();
        assert!(median < 0.05, "seed {seed}: median {median}");
        assert!(pred.params.b > 1.0 && pred.params.k > 0.0 && pred.params.is_finite());
    }
}

#[test]
fn checkpoint_resumes_identically() {
    let truth = GroundTruthParams::default();
    let stream = sample_stream(&truth, 400, 9);
    let mut a = Predictor::initial(5);
    for s in &stream[..200] {
        a.update(s).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("predictor.json");
    a.save(&path).unwrap();
    let mut b = Predictor::load(&path).unwrap();
    for s in &stream[200..] {
        assert_eq!(a.update(s).unwrap(), b.update(s).unwrap());
    }
    assert_eq!(a, b);
}

fn sample_strategy() -> impl Strategy<Value = FeedbackSample> {
    (
        prop::collection::vec(0.0f64..3.0, 5),
        0.0f64..1.0,
        0.0f64..1.0,
        any::<bool>(),
        0.5f64..60.0,
    )
        .prop_map(|(m, cmp, mem, high, actual)| FeedbackSample {
            batch_id: 0,
            m_avg_twa: m,
            m_self_cmp: cmp,
            m_self_mem: mem,
            priority: if high { PriorityLevel::High } else { PriorityLevel::Low },
            intf_predicted: 1.0,
            intf_actual: actual,
        })
}

proptest! {
    #[test]
    fn updates_keep_parameters_in_range(samples in prop::collection::vec(sample_strategy(), 1..200)) {
        let mut pred = Predictor::new(PredictorParams::initial(5));
        for (i, s) in samples.iter().enumerate() {
            pred.update(s).unwrap();
            prop_assert_eq!(pred.optimizer.t, i as u64 + 1);
            prop_assert!(pred.params.b > 1.0);
            prop_assert!(pred.params.k > 0.0);
            prop_assert!(pred.params.is_finite());
            prop_assert!(pred.optimizer.m.iter().chain(&pred.optimizer.v).all(|x| x.is_finite()));
        }
    }

    #[test]
    fn predictions_never_below_one(s in sample_strategy()) {
        let pred = Predictor::initial(5);
        let intf = pred.predict_intf(&s.m_avg_twa, s.m_self_cmp, s.m_self_mem, s.priority).unwrap();
        prop_assert!(intf >= 1.0);
    }
}
