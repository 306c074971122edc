use dnln_web::{attention, shift, upscale};

fn gradient(w: usize, h: usize) -> Vec<u8> {
    (0..w * h).flat_map(|i| [(i % w * 20) as u8, (i / w * 30) as u8, 90, 255]).collect()
}

#[test]
fn flat_image_upscales_to_itself() {
    let flat: Vec<u8> = std::iter::repeat_n([40u8, 120, 200, 255], 25).flatten().collect();
    let up = upscale(&flat, 5, 5, 3).unwrap();
    assert_eq!(up.len(), 4 * 15 * 15);
    assert!(up.chunks(4).all(|p| p == [40, 120, 200, 255]));
}

#[test]
fn integer_shift_moves_pixels() {
    let img = gradient(6, 5);
    let out = shift(&img, 6, 5, 1.0, 2.0, 1.0).unwrap();
    // pixel (1, 1) now shows (2, 3)
    assert_eq!(&out[4 * (6 + 1)..4 * (6 + 1) + 4], &img[4 * (2 * 6 + 3)..4 * (2 * 6 + 3) + 4]);
    let dark = shift(&img, 6, 5, 0.0, 0.0, 0.0).unwrap();
    assert!(dark.chunks(4).all(|p| p == [0, 0, 0, 255]));
}

#[test]
fn attention_is_a_distribution() {
    let img = gradient(7, 4);
    let w = attention(&img, 7, 4, 2, 3, 0.05).unwrap();
    assert_eq!(w.len(), 28);
    assert!((w.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
    assert!(w.iter().all(|&v| v > 0.0));
}

#[test]
fn bad_inputs_are_rejected() {
    let img = gradient(3, 3);
    assert!(upscale(&img[..8], 3, 3, 2).unwrap_err().contains("expected 36 bytes"));
    assert!(attention(&img, 3, 3, 3, 0, 0.1).is_err());
    assert!(attention(&img, 3, 3, 0, 0, 0.0).is_err());
    assert!(shift(&img, 3, 3, f64::NAN, 0.0, 1.0).is_err());
}
