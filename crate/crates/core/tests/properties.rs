mod support;

#[test]
fn env_conservation_and_bounds() {
    support::env_conservation().unwrap();
}

#[test]
fn fusion_is_order_invariant() {
    support::fusion_order_invariance().unwrap();
}

#[test]
fn zero_weight_experts_vanish() {
    support::zero_weight_annihilation().unwrap();
}

#[test]
fn softmax_and_attention_normalize() {
    support::softmax_normalization().unwrap();
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    support::checkpoint_round_trip().unwrap();
}

#[test]
fn seeded_runs_repeat() {
    support::seeded_determinism().unwrap();
}
