mod common;

use common::gradient_suite as suite;

#[test]
fn convolution_gradients() {
    suite::convolutions().unwrap();
}

#[test]
fn normalization_and_activations() {
    suite::normalization_and_activations().unwrap();
}

#[test]
fn pointwise_and_broadcast_ops() {
    suite::pointwise_and_broadcast().unwrap();
}

#[test]
fn shape_ops() {
    suite::shape_ops().unwrap();
}

#[test]
fn kernel_generation_gradient() {
    suite::kernel_generation().unwrap();
}

#[test]
fn conv_adjoint_identities() {
    suite::conv_adjoints().unwrap();
}

#[test]
fn u_conv_block_gradient() {
    suite::u_conv_block().unwrap();
}

#[test]
fn full_network_gradient_reaches_latent_filters() {
    suite::full_network().unwrap();
}
