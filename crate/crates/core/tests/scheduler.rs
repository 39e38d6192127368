use proptest::prelude::*;

use infersim::model::{PriorityLevel, Request};
use infersim::predictor::Predictor;
use infersim::profile::builtin_profile_set;
use infersim::scheduler::{Ablation, PolicyKind, Scheduler, SchedulerConfig};

fn scheduler(policy: PolicyKind, gpus: usize) -> Scheduler {
    let profiles = builtin_profile_set();
    let predictor = Predictor::initial(profiles.metric_count());
    Scheduler::new(profiles, gpus, policy, Ablation::default(), SchedulerConfig::default(), predictor)
}

fn policy_strategy() -> impl Strategy<Value = PolicyKind> {
    prop::sample::select(PolicyKind::ALL.to_vec())
}

proptest! {
    #[test]
    fn pass_respects_order_limits_and_sizes(
        policy in policy_strategy(),
        gpus in 1usize..5,
        arrivals in prop::collection::vec((0usize..6, 0.0f64..40.0), 1..120),
        now in 40.0f64..60.0,
    ) {
        let mut s = scheduler(policy, gpus);
        let mut arrivals = arrivals;
        arrivals.sort_by(|a, b| a.1.total_cmp(&b.1));
        for (i, (model, t)) in arrivals.into_iter().enumerate() {
            let deadline = s.profiles.get(model).deadline;
            s.enqueue(Request::new(i as u64, model, t, deadline));
        }
        let queued_before = s.queued();
        let out = s.pass(now).unwrap();

        let mut seen_low = false;
        for (d, batch) in &out.dispatched {
            if d.priority == PriorityLevel::Low {
                seen_low = true;
            }
            prop_assert!(!(seen_low && d.priority == PriorityLevel::High), "high after low");
            let p = s.profiles.get(d.model);
            prop_assert!(batch.size() >= 1 && batch.size() <= p.max_batch_size);
            prop_assert_eq!(batch.size(), d.size);
            prop_assert!(batch.requests.iter().all(|r| r.model == d.model));
            if policy == PolicyKind::InterferenceAware {
                prop_assert!(d.front_enqueue + d.estimated_latency <= d.deadline_abs + 1e-9);
            }
        }
        for g in &s.gpus {
            prop_assert!(g.running.len() <= g.concurrency_limit);
        }
        let dispatched: usize = out.dispatched.iter().map(|(_, b)| b.size()).sum();
        prop_assert_eq!(queued_before, s.queued() + dispatched + out.dropped.len());
        for r in &out.dropped {
            prop_assert!(r.deadline_abs - now < s.profiles.get(r.model).inf(1));
        }
    }

    #[test]
    fn early_drop_is_shared_by_every_policy(
        arrivals in prop::collection::vec((0usize..6, 0.0f64..40.0), 1..60),
        now in 40.0f64..80.0,
    ) {
        let mut dropped = Vec::new();
        for policy in PolicyKind::ALL {
            let mut s = scheduler(policy, 2);
            for (i, (model, t)) in arrivals.iter().enumerate() {
                let deadline = s.profiles.get(*model).deadline;
                s.enqueue(Request::new(i as u64, *model, *t, deadline));
            }
            let out = s.pass(now).unwrap();
            let mut ids: Vec<u64> = out.dropped.iter().map(|r| r.request_id).collect();
            ids.sort();
            dropped.push(ids);
        }
        prop_assert!(dropped.windows(2).all(|w| w[0] == w[1]));
    }
}
