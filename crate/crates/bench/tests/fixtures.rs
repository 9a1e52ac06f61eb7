use salab_bench::{q_fixture, scbcd_fixture, td_fixture};
use salab_core::sa::SaProblem;

#[test]
fn fixtures_have_the_advertised_shapes() {
    assert_eq!(td_fixture(20, 5).n_features(), 5);
    assert_eq!(td_fixture(20, 5).dim(), 6);
    assert_eq!(q_fixture(20, 4).dim(), 80);
    let s = scbcd_fixture(50, 5);
    assert_eq!((s.p(), s.dim()), (5, 50));
}
