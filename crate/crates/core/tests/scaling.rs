//! Timing properties of the layer. One test in its own binary, so nothing
//! else competes for cores while it measures.

use satgcn::cli::time_layer;

#[test]
fn layer_time_scaling() {
    let small = time_layer(4000, 64, 9, 7, 1).unwrap().as_secs_f64();
    let large = time_layer(8000, 64, 9, 7, 1).unwrap().as_secs_f64();
    let ratio = large / small;
    assert!((1.6..=2.4).contains(&ratio), "doubling N changed time by {ratio:.2}x");

    let k1 = time_layer(4000, 64, 1, 7, 2).unwrap();
    let k9 = time_layer(4000, 64, 9, 7, 2).unwrap();
    assert!(k1 < k9, "k=1 {k1:?} vs k=9 {k9:?}");
}
