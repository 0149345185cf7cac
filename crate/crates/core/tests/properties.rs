mod support;

use proptest::prelude::*;
use support::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: CASES, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn plot_contrasts_average_to_the_estimand(case in case_strategy()) {
        plot_contrast_identity(case)?;
    }

    #[test]
    fn weighted_observed_mean_is_average_of_adjusted_means(case in case_strategy()) {
        adjusted_mean_identity(case)?;
    }

    #[test]
    fn both_biases_are_nonnegative(case in case_strategy()) {
        biases_nonnegative(case)?;
    }

    #[test]
    fn variance_estimate_is_nonnegative_on_every_draw(case in case_strategy()) {
        v_hat_nonnegative(case)?;
    }

    #[test]
    fn every_constructed_matrix_meets_the_conditions(input in (sizes_with_b(), 0.0f64..=1.0)) {
        constructed_b_verifies(input)?;
    }

    #[test]
    fn eigensolver_preserves_trace_and_orthogonality(a in symmetric_matrix()) {
        eigen_checks(a)?;
    }

    #[test]
    fn balanced_matrix_reproduces_delta(input in (2usize..=6, 4usize..=8, any::<u64>())) {
        balanced_biases_agree(input)?;
    }
}
