//! Checks every differentiable loss against the central finite-difference
//! oracle on tiny 64-bit models.
//!
//! Run with: cargo run --release --example gradient_checks

use gsa::verify::{check_actor_critic_losses, check_bc_loss, check_reparam_identity, check_wm_loss};
use gsa::worldmodel::ObsLayout;

fn main() {
    let vector = ObsLayout::Vector { dim: 5 };
    let image = ObsLayout::Image { size: 8 };

    println!("max relative error vs central finite differences (epsilon 1e-5):");
    println!(
        "  sequence loss, vector obs, KL floor on   {:.3e}",
        check_wm_loss(vector, 1.0, 1.0, true)
    );
    println!(
        "  sequence loss, vector obs, KL floor off  {:.3e}",
        check_wm_loss(vector, 1.0, 0.0, true)
    );
    println!(
        "  sequence loss, image obs                 {:.3e}",
        check_wm_loss(image, 1.0, 1.0, true)
    );
    let (actor, critic) = check_actor_critic_losses();
    println!("  actor loss through imagined dynamics     {actor:.3e}");
    println!("  critic return-regression loss            {critic:.3e}");
    println!(
        "  behavior-cloning loss, vector obs        {:.3e}",
        check_bc_loss(ObsLayout::Vector { dim: 4 })
    );
    println!(
        "  behavior-cloning loss, image obs         {:.3e}",
        check_bc_loss(image)
    );
    println!(
        "  reparameterized-sample mean identity     {:.3e}",
        check_reparam_identity()
    );
}
