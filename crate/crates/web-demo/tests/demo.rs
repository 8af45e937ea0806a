use moveact_web::{masks_for, run_toy_edit, timesteps, IMAGE_SIZE};

const OBJECT: [f64; 4] = [0.125, 0.5, 0.375, 0.75];
const TARGET: [f64; 4] = [0.5, 0.5, 0.875, 0.875];

#[test]
fn masks_cover_every_cell_once() {
    let view = masks_for(&OBJECT, &TARGET, 0.5).unwrap();
    assert_eq!(view.labels.len(), view.size * view.size);
    assert_eq!(view.heatmap.len(), view.labels.len());
    assert!(view.labels.contains(&3));
    assert!(view.labels.contains(&1));
    assert!(view.labels.iter().all(|l| *l <= 3));
}

#[test]
fn target_cells_match_the_box() {
    let view = masks_for(&OBJECT, &TARGET, 0.5).unwrap();
    let n = view.size;
    for r in 0..n {
        for c in 0..n {
            let inside = (4..7).contains(&r) && (4..7).contains(&c);
            assert_eq!(view.labels[r * n + c] == 3, inside, "cell ({r},{c})");
        }
    }
}

#[test]
fn schedule_matches_fifty_steps() {
    let t = timesteps(50).unwrap();
    assert_eq!(t.len(), 50);
    assert_eq!(t[0], 1);
    assert_eq!(t[34], 681);
    assert_eq!(t[49], 981);
    assert!(timesteps(0).is_err());
}

#[test]
fn toy_edit_returns_curve_and_images() {
    let view = run_toy_edit(&OBJECT, &TARGET, 5, 10.0).unwrap();
    assert_eq!(view.loss_total.len(), 5);
    assert!(view.loss_total[4] < view.loss_total[0]);
    assert_eq!(view.input_rgba.len(), IMAGE_SIZE * IMAGE_SIZE * 4);
    assert_eq!(view.edited_rgba.len(), view.input_rgba.len());
    assert_ne!(view.input_rgba, view.edited_rgba);
}

#[test]
fn rejects_bad_boxes() {
    assert!(masks_for(&[0.5, 0.5, 0.4, 0.9], &TARGET, 0.5).is_err());
    assert!(run_toy_edit(&OBJECT, &[0.0, 0.0, 1.0], 1, 10.0).is_err());
}
