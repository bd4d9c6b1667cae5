#[path = "common/gradcheck.rs"]
mod gradcheck;

#[test]
fn intra_and_inter_losses() {
    gradcheck::intra_and_inter_losses();
}

#[test]
fn similarity_and_orthogonality_losses() {
    gradcheck::similarity_and_orthogonality_losses();
}

#[test]
fn generalisation_loss() {
    gradcheck::generalisation_loss();
}

#[test]
fn prompted_forward_wrt_prefix_keys_and_values() {
    gradcheck::prompted_forward_wrt_prefix_keys_and_values();
}

#[test]
fn prompted_forward_wrt_generator_scalers_shifters_and_key() {
    gradcheck::prompted_forward_wrt_generator_scalers_shifters_and_key();
}
