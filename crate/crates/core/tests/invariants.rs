//! Randomized invariants, 1000 cases each.

mod common;

use common::props::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows(case in softmax_case()) {
        softmax_rows_sum_to_one(case)?;
    }

    #[test]
    fn head_weights(case in aaf_case()) {
        head_weights_in_open_unit_interval(case)?;
    }

    #[test]
    fn binary_mask(case in clip_case()) {
        mask_is_binary(case)?;
    }

    #[test]
    fn global_lambda(case in clip_case()) {
        global_lambda_is_mean_of_tiles(case)?;
    }

    #[test]
    fn tile_retention(case in clip_case()) {
        every_tile_retains_a_pixel(case)?;
    }

    #[test]
    fn nonnegative_losses(case in loss_case()) {
        losses_are_nonnegative(case)?;
    }

    #[test]
    fn order_free_evaluation(case in eval_case()) {
        evaluation_ignores_sample_order(case)?;
    }
}
