//! Invariant checks shared by the property tests and the acceptance run.
//! Each returns `Err` with the minimal failing input.

#![allow(dead_code)]

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use qnet_core::atvc::{weighted_poe, AtvcModel, GaussianMessage, ModelConfig};
use qnet_core::env::{AllocationAction, Env, EnvConfig};
use qnet_core::math::softmax;
use qnet_core::trainer::{simulate, Driver};

pub type Check = fn() -> Result<(), String>;

/// Name and body of every invariant suite.
pub const SUITES: [(&str, Check); 6] = [
    ("env conservation and bounds", env_conservation),
    ("fusion order invariance", fusion_order_invariance),
    ("zero-weight annihilation", zero_weight_annihilation),
    ("softmax normalization", softmax_normalization),
    ("checkpoint round trip", checkpoint_round_trip),
    ("seeded determinism", seeded_determinism),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn report<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

fn arb_env() -> impl Strategy<Value = EnvConfig> {
    (1usize..6, 1usize..4, 1usize..8, 0.0f64..3.0, 0.2f64..3.0, 0.5f64..3.0, 0.0f64..=1.0, any::<u64>()).prop_map(
        |(servers, d, buffer, arrival_rate, service_rate, delta_t, p_stale, seed)| EnvConfig {
            schedulers: servers,
            servers,
            choices: d.min(servers),
            arrival_rate,
            service_rate,
            buffer,
            delta_t,
            episode_len: 20,
            p_stale,
            access_map: None,
            seed,
        },
    )
}

pub fn env_conservation() -> Result<(), String> {
    let strategy = (arb_env(), vec(vec(0.01f64..1.0, 3), 6));
    report(runner(200).run(&strategy, |(cfg, raw)| {
        let mut env = Env::new(cfg.clone()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let buffer = cfg.buffer as u64;
        for t in 0..cfg.episode_len {
            let actions: Vec<AllocationAction> = (0..cfg.schedulers)
                .map(|i| {
                    let w = &raw[(i + t) % raw.len()][..cfg.choices];
                    let total: f64 = w.iter().sum();
                    AllocationAction::from_fractions(i, w.iter().map(|x| x / total).collect())
                })
                .collect();
            let before = env.state().lengths.clone();
            let pending: u64 = env.pending_arrivals().iter().sum();
            let out = env.step(&actions).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(out.total_arrivals(), pending);
            prop_assert_eq!(out.incoming.iter().sum::<u64>(), pending);
            prop_assert_eq!(out.reward, -(out.total_drops() as f64));
            for j in 0..cfg.servers {
                let offered = before[j] as u64 + out.incoming[j];
                prop_assert_eq!(out.drops[j], offered.saturating_sub(buffer));
                prop_assert!(out.departures[j] <= offered.min(buffer));
                let after = env.state().lengths[j] as u64;
                prop_assert!(after <= buffer);
                prop_assert_eq!(after, offered - out.drops[j] - out.departures[j]);
            }
        }
        Ok(())
    }))
}

fn arb_messages(l: usize) -> impl Strategy<Value = Vec<(GaussianMessage, f64)>> {
    vec((vec(-5.0f64..5.0, l), vec(0.01f64..20.0, l), 0.0f64..1.0), 1..7).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(k, (mu, sigma, w))| (GaussianMessage { sender_id: k, mu, sigma }, w))
            .collect()
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

pub fn fusion_order_invariance() -> Result<(), String> {
    let strategy = (arb_messages(4), any::<prop::sample::Index>(), any::<bool>());
    report(runner(300).run(&strategy, |(set, rot, prior)| {
        let (msgs, w): (Vec<_>, Vec<_>) = set.iter().cloned().unzip();
        let mut shuffled = set.clone();
        shuffled.rotate_left(rot.index(set.len()));
        shuffled.reverse();
        let (msgs2, w2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        let (a, b) = match (weighted_poe(&msgs, &w, prior), weighted_poe(&msgs2, &w2, prior)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(_), Err(_)) => return Ok(()),
            _ => return Err(TestCaseError::fail("only one ordering failed")),
        };
        for k in 0..4 {
            prop_assert!(close(a.mu[k], b.mu[k]), "mu {} vs {}", a.mu[k], b.mu[k]);
            prop_assert!(close(a.sigma[k], b.sigma[k]), "var {} vs {}", a.sigma[k], b.sigma[k]);
        }
        Ok(())
    }))
}

pub fn zero_weight_annihilation() -> Result<(), String> {
    let strategy = (arb_messages(3), vec(-1e3f64..1e3, 3), vec(1e-4f64..1e4, 3));
    report(runner(300).run(&strategy, |(set, mu, sigma)| {
        let (mut msgs, mut w): (Vec<_>, Vec<_>) = set.into_iter().unzip();
        let base = weighted_poe(&msgs, &w, true).map_err(|e| TestCaseError::fail(e.to_string()))?;
        msgs.push(GaussianMessage {
            sender_id: 99,
            mu,
            sigma,
        });
        w.push(0.0);
        let with = weighted_poe(&msgs, &w, true).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for k in 0..3 {
            prop_assert!(close(base.mu[k], with.mu[k]));
            prop_assert!(close(base.sigma[k], with.sigma[k]));
        }
        Ok(())
    }))
}

pub fn softmax_normalization() -> Result<(), String> {
    let model = AtvcModel::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    report(runner(300).run(&(vec(-700.0f64..700.0, 1..12), arb_messages(16)), |(x, set)| {
        let p = softmax(&x);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (msgs, _): (Vec<_>, Vec<_>) = set.into_iter().unzip();
        let alpha = model.attention_weights(&msgs).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(alpha.len(), msgs.len());
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        Ok(())
    }))
}

pub fn checkpoint_round_trip() -> Result<(), String> {
    let dir = std::env::temp_dir().join(format!("qnet-props-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let strategy = (any::<u64>(), 1usize..4, 1usize..7, 0.0f64..1.0);
    let out = report(runner(24).run(&strategy, |(seed, latent, buffer, threshold)| {
        let model = AtvcModel::new(ModelConfig {
            choices: 2,
            buffer,
            latent_dim: latent * 4,
            threshold,
            seed,
            ..ModelConfig::default()
        })
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let path = dir.join(format!("{seed}.ckpt"));
        model.save(&path).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let back = AtvcModel::load(&path).map_err(|e| TestCaseError::fail(e.to_string()))?;
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(&back.config, &model.config);
        let bits = |m: &AtvcModel| -> Vec<u64> {
            m.to_arrays(true)
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        prop_assert!(bits(&back) == bits(&model));
        Ok(())
    }));
    std::fs::remove_dir_all(&dir).ok();
    out
}

pub fn seeded_determinism() -> Result<(), String> {
    let model = AtvcModel::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let strategy = (any::<u64>(), 0.0f64..=1.0, any::<bool>());
    report(runner(24).run(&strategy, |(seed, p_stale, learned)| {
        let env = EnvConfig {
            p_stale,
            episode_len: 15,
            ..EnvConfig::table1()
        };
        let driver = if learned {
            Driver::Learned {
                model: &model,
                fusion: qnet_core::atvc::Fusion::Soft,
                deterministic: false,
            }
        } else {
            Driver::Random
        };
        let run = || simulate(driver, &env, 3, seed, learned).map_err(|e| TestCaseError::fail(e.to_string()));
        let (s1, t1) = run()?;
        let (s2, t2) = run()?;
        prop_assert_eq!(s1, s2);
        if let (Some(a), Some(b)) = (t1, t2) {
            prop_assert_eq!(a.observed, b.observed);
            prop_assert!(a.actions.iter().zip(&b.actions).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        Ok(())
    }))
}
