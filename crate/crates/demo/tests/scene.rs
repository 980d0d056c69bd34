use treemap_demo::Scene;

#[test]
fn well_separated_scene_decodes_exactly() {
    let mut scene = Scene::new(3, 256, 60).unwrap();
    assert_eq!((scene.width(), scene.height()), (256, 256));
    assert_eq!(scene.truth().len(), 120);
    let heat = scene.render(2.0, 0.0).unwrap();
    assert_eq!(heat.len(), 256 * 256);
    assert!(heat.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(scene.decode(0.5, 6.0).unwrap().len(), 120);
    assert_eq!(scene.score(0.5, 6.0, 5.0).unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn small_windows_split_wide_blobs() {
    let mut scene = Scene::new(3, 256, 60).unwrap();
    scene.render(2.0, 1.0).unwrap();
    let loose = scene.score(0.5, 4.0, 5.0).unwrap();
    let tight = scene.score(0.5, 14.0, 5.0).unwrap();
    assert_eq!(loose[1], 1.0);
    assert!(loose[0] < tight[0]);
}

#[test]
fn cover_is_binary_and_monotone() {
    let mut scene = Scene::new(9, 128, 30).unwrap();
    scene.render(2.5, 0.5).unwrap();
    let low = scene.cover(0.2);
    let high = scene.cover(0.6);
    assert!(low.iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(low.iter().zip(&high).all(|(l, h)| l >= h));
    assert!(high.contains(&1.0));
}

#[test]
fn sizes_and_counts_are_clamped() {
    let scene = Scene::new(1, 4, 1000).unwrap();
    assert_eq!(scene.width(), 32);
    assert_eq!(scene.truth().len(), 2 * (32 * 32 / 250));
}
