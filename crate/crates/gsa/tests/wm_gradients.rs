//! Sequence-loss gradients against the finite-difference oracle, both
//! observation modes, KL floor on and off.

use gsa::verify::check_wm_loss;
use gsa::worldmodel::ObsLayout;

const TOL: f64 = 1e-4;

#[test]
fn vector_mode_with_free_bits() {
    assert!(check_wm_loss(ObsLayout::Vector { dim: 5 }, 1.0, 1.0, true) < TOL);
}

#[test]
fn vector_mode_without_free_bits() {
    assert!(check_wm_loss(ObsLayout::Vector { dim: 5 }, 1.0, 0.0, true) < TOL);
}

#[test]
fn vector_mode_beta_zero() {
    assert!(check_wm_loss(ObsLayout::Vector { dim: 5 }, 0.0, 0.0, false) < TOL);
}

#[test]
fn image_mode_with_free_bits() {
    assert!(check_wm_loss(ObsLayout::Image { size: 8 }, 1.0, 1.0, true) < TOL);
}

#[test]
fn image_mode_without_free_bits() {
    assert!(check_wm_loss(ObsLayout::Image { size: 8 }, 1.0, 0.0, false) < TOL);
}
