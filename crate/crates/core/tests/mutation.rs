use crossdtr_core::objective::{sigmoid_focal, FocalParams};
use crossdtr_core::selfcheck::{run, Hooks, SelfCheckOptions};
use crossdtr_tensor::{Graph, Tensor, Var};

fn flipped_focal(
    g: &mut Graph,
    logits: Var,
    targets: &Tensor,
    focal: FocalParams,
) -> crossdtr_core::Result<Var> {
    let neg = g.neg(logits);
    sigmoid_focal(g, neg, targets, focal)
}

#[test]
fn sign_flipped_focal_is_caught_by_name() {
    let opts = SelfCheckOptions {
        hooks: Hooks {
            sigmoid_focal: flipped_focal,
        },
        ..SelfCheckOptions::default()
    };
    let results = run(&opts);
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    assert_eq!(failed, ["focal loss vs scalar oracle"]);
}

#[test]
fn pristine_selfcheck_passes() {
    let results = run(&SelfCheckOptions::default());
    assert!(results.iter().all(|r| r.passed), "{results:#?}");
}
