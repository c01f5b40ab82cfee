//! The lambda-return recursion next to its forward-expansion oracle.
//!
//! Run with: cargo run --release --example lambda_returns

use gsa::agent::lambda_returns;
use gsa::verify::lambda_return_oracle;

fn main() {
    let rewards = [1.0, 0.0, 0.5, -0.25];
    let values = [0.2, 0.4, 0.6, 0.8, 1.0];
    let (gamma, lam) = (0.99, 0.95);

    let fast = lambda_returns(&rewards, &values, gamma, lam);
    let slow = lambda_return_oracle(&rewards, &values, gamma, lam);
    println!("t  recursion        expansion        |diff|");
    for t in 0..rewards.len() {
        println!(
            "{t}  {:<16.12} {:<16.12} {:.1e}",
            fast[t],
            slow[t],
            (fast[t] - slow[t]).abs()
        );
    }

    // Boundary behavior: lambda 0 is one-step TD, lambda 1 a discounted sum.
    let td = lambda_returns(&rewards, &values, gamma, 0.0);
    println!("\nlambda=0 (one-step TD): {td:?}");
    let mc = lambda_returns(&rewards, &values, gamma, 1.0);
    println!("lambda=1 (discounted sum + bootstrap): {mc:?}");
}
