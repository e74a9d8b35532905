mod oracles;

use oracles::{gradient_check, random_gradcheck_case};

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..20 {
        let (mut net, x, labels) = random_gradcheck_case(seed);
        let r = gradient_check(&mut net, &x, &labels, 1e-3, 1e-6);
        assert!(r.checked > r.skipped, "seed {seed}: too many kinks ({} of {})", r.skipped, r.checked + r.skipped);
        assert!(r.max_rel_err <= 1e-4, "seed {seed}: max relative error {:.3e}", r.max_rel_err);
    }
}
