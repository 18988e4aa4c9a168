use betree_core::{AuditLevel, Constants, DeamoTree, Params, TreeConfig};

fn tree(keys: &[u64], params: Params) -> DeamoTree<u64> {
    let mut cfg = TreeConfig::new(params);
    cfg.audit = AuditLevel::Census;
    DeamoTree::from_sorted(cfg, keys).unwrap()
}

#[test]
fn bulk_loaded_tree_is_sound_and_updatable() {
    let params = Params::derive_with(16, 0.9, 64, Constants { c_i: 16, ..Constants::default() }).unwrap();
    let keys: Vec<u64> = (0..5_000).map(|i| i * 3).collect();
    let mut t = tree(&keys, params);
    assert_eq!(t.contents().unwrap(), keys);
    assert!(t.audit().is_empty(), "{:?}", t.audit());
    assert_eq!(t.predecessor(3 * 100 + 2).unwrap(), Some(300));
    for k in 0..500u64 {
        t.insert(k * 3 + 1).unwrap();
    }
    assert_eq!(t.len(), 5_500);
    assert!(t.audit().is_empty(), "{:?}", t.audit());
    assert!(t.violations().is_empty());
}

#[test]
fn bulk_load_rejects_unsorted_input() {
    let params = Params::derive(256, 0.5, 1 << 16).unwrap();
    assert!(DeamoTree::from_sorted(TreeConfig::new(params), &[3u64, 1]).is_err());
    assert!(DeamoTree::from_sorted(TreeConfig::new(params), &[1u64, 1]).is_err());
    let empty = DeamoTree::<u64>::from_sorted(TreeConfig::new(params), &[]).unwrap();
    assert!(empty.is_empty());
}
