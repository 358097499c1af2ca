#[path = "suites/gradients.rs"]
mod gradients;

macro_rules! op_tests {
    ($($name:ident => $op:literal),* $(,)?) => {$(
        #[test]
        fn $name() {
            let report = gradients::run_op($op, 42).unwrap_or_else(|e| panic!("{e}"));
            assert_eq!(report.op, $op);
            assert!(report.entries >= gradients::TRIALS, "{} checked {} entries", $op, report.entries);
        }
    )*};
}

op_tests! {
    conv2d => "conv2d",
    conv_transpose2d => "conv_transpose2d",
    batch_norm_train => "batch_norm_train",
    batch_norm_eval => "batch_norm_eval",
    relu => "relu",
    max_pool2 => "max_pool2",
    add => "add",
    mul => "mul",
    scale => "scale",
    concat_channels => "concat_channels",
    sum => "sum",
    mse_loss => "mse_loss",
    cross_entropy => "cross_entropy",
    global_avg_pool => "global_avg_pool",
    linear => "linear",
    reflect_pad => "reflect_pad",
    crop => "crop",
    shift_channels => "shift_channels",
}

#[test]
fn op_list_is_covered() {
    assert_eq!(gradients::OPS.len(), 18);
}
