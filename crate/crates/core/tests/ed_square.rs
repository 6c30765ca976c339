use gvmc::ed::{lowest_k, lowest_k_dense, lowest_k_krylov, LanczosSettings};
use gvmc::lattice::{Heisenberg, LatticeGeometry, SectorIndex};

#[test]
fn four_by_four_sector_spectrum() {
    let g = LatticeGeometry::square(4).unwrap();
    let s = SectorIndex::sector(&g, 0);
    assert_eq!(s.len(), 12870);
    let h = Heisenberg::new(g);
    let r = lowest_k(&h, &s, 4, 7).unwrap();
    eprintln!("{:?}", r.energies);
    assert!((r.energies[0] + 11.228_483).abs() < 1e-5);
}

#[test]
fn krylov_and_dense_agree_on_mid_sized_sectors() {
    for (lx, ly) in [(10, 1), (4, 3)] {
        let g = LatticeGeometry::new(lx, ly).unwrap();
        let s = SectorIndex::sector(&g, 0);
        assert!(s.len() <= 1000);
        let h = Heisenberg::new(g);
        let d = lowest_k_dense(&h, &s, 4).unwrap();
        let k = lowest_k_krylov(&h, &s, 4, &LanczosSettings::default()).unwrap();
        for (a, b) in d.energies.iter().zip(&k.energies) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
