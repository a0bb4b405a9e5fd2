use crate::matrix::Matrix;

/// Concatenates `k` consecutive frames into one super frame without overlap.
/// Trailing frames that do not fill a super frame are dropped.
pub fn stack_frames(frames: &Matrix, k: usize) -> Matrix {
    assert!(k >= 1, "stacking factor must be at least 1");
    let out_rows = frames.rows() / k;
    let width = frames.cols() * k;
    // rows are contiguous, so super frame i is one contiguous slice
    let data = frames.as_slice()[..out_rows * width].to_vec();
    Matrix::from_vec(out_rows, width, data).expect("sizes computed above")
}

/// Label for super frame `i`: the label of its middle source frame.
pub fn stack_labels(labels: &[usize], k: usize) -> Vec<usize> {
    assert!(k >= 1, "stacking factor must be at least 1");
    (0..labels.len() / k).map(|i| labels[i * k + k / 2]).collect()
}
