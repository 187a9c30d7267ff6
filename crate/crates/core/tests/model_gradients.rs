mod common;

use common::{tiny_batch, tiny_graph, tiny_model};
use transam::gradcheck::{gradient_check, GradCheckOptions};
use transam::model::MaskMode;

fn check(mode: MaskMode) -> f64 {
    let (_, index) = tiny_graph();
    let (mut model, store) = tiny_model(4, 2, 2, 1, 11);
    model.config.mask_mode = mode;
    let batch = tiny_batch(model.cls_id());
    let report = gradient_check(
        |s, tape| {
            let mut bound = model.bind(tape, s)?;
            bound.batch_loss(tape, s, &index, &batch, None)
        },
        &store,
        &GradCheckOptions::default(),
    )
    .unwrap();
    for e in report.offenders() {
        eprintln!(
            "{} [{}]: analytic {} numeric {} rel {}",
            e.name, e.index, e.analytic, e.numeric, e.rel_error
        );
    }
    assert_eq!(report.checked, store.numel());
    report.max_rel_error
}

#[test]
fn end_to_end_literal_mask() {
    let err = check(MaskMode::Literal);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn end_to_end_block_mask() {
    let err = check(MaskMode::Block);
    assert!(err <= 1e-4, "max relative error {err}");
}
