mod common;

use common::pe_states;
use posattn::probing::{probe, probe_absolute, ProbeConfig, ProbeTask};

fn cfg(task: ProbeTask, k: usize) -> ProbeConfig {
    ProbeConfig {
        task,
        layer: 0,
        max_positions: k,
        ..ProbeConfig::default()
    }
}

#[test]
fn sinusoid_rows_are_linearly_decodable() {
    let states = pe_states(30, 128, 64);
    let r = probe_absolute(&states, &cfg(ProbeTask::Absolute, 128), 1).unwrap();
    let acc = r.overall().unwrap().accuracy.unwrap();
    assert!(acc >= 99.0, "{acc}");
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let states = pe_states(30, 128, 64);
    let c = ProbeConfig {
        shuffle_labels: true,
        ..cfg(ProbeTask::Absolute, 128)
    };
    let acc = probe_absolute(&states, &c, 1).unwrap().overall().unwrap().accuracy.unwrap();
    let chance = 100.0 / 128.0;
    assert!((acc - chance).abs() <= 3.0, "{acc}");
}

#[test]
fn relative_and_order_tasks_on_sinusoids() {
    let states = pe_states(30, 64, 64);
    let rel = probe(&states, &cfg(ProbeTask::Relative, 64), 2).unwrap();
    let order = probe(&states, &cfg(ProbeTask::Order, 64), 2).unwrap();
    let (r, o) = (rel.overall().unwrap().accuracy.unwrap(), order.overall().unwrap().accuracy.unwrap());
    // sinusoid differences depend on i + j as well as i − j, so a
    // bias-free linear probe only beats chance on the relative task
    assert!(r > 2.0 * 100.0 / 40.0, "relative {r}");
    assert!(o > 95.0, "order {o}");
    // one row per bucket plus the overall row
    assert_eq!(rel.rows.len(), 1 + 2 * 20);
    assert!(rel.to_csv().starts_with("task,layer,bucket,accuracy,relaxed_accuracy\n"));

    let shuffled = ProbeConfig {
        shuffle_labels: true,
        ..cfg(ProbeTask::Order, 64)
    };
    let o = probe(&states, &shuffled, 2).unwrap().overall().unwrap().accuracy.unwrap();
    assert!((o - 50.0).abs() <= 3.0, "{o}");
}
