use std::ffi::CString;
use std::ptr;

use ndarray::Array4;
use rand::SeedableRng;

use samslr::{samslr_model_forward, samslr_model_free, samslr_model_load, samslr_model_num_classes, SamslrStatus};
use samslr_core::checkpoint::Checkpoint;
use samslr_core::nn::{Mode, NetRng};
use samslr_core::train::RunConfig;

const CONFIG: &str = "net = slgcn\nstream = joint\nroot = /\nmanifest = unused.csv\nnum_classes = 3\n\
                      channels = 4,8\nstride2_blocks = 1\ngroups = 2\nseed = 5\n";

#[test]
fn loaded_model_matches_core_forward() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_text(CONFIG).unwrap();
    let mut net = cfg.build_network().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::capture(&mut net, &cfg.text, 0, None).save(&path).unwrap();
    // Compare against the single-precision weights the file holds.
    let (_, mut stored, _) = samslr_core::train::load_checkpoint(&path).unwrap();

    let x = Array4::from_shape_fn((2, 3, 10, 27), |(b, c, t, n)| ((b * 31 + c * 7 + t * 3 + n) as f64 * 0.37).sin());
    let want = stored.forward(&x, Mode::Eval, &mut NetRng::seed_from_u64(0)).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    let mut got = vec![0.0; 6];
    unsafe {
        assert_eq!(samslr_model_load(c_path.as_ptr(), &mut model), SamslrStatus::Ok);
        let mut k = 0;
        assert_eq!(samslr_model_num_classes(model, &mut k), SamslrStatus::Ok);
        assert_eq!(k, 3);
        let dims = [2usize, 3, 10, 27];
        let input = x.as_standard_layout();
        let status = samslr_model_forward(model, input.as_ptr(), dims.as_ptr(), got.as_mut_ptr(), got.len());
        assert_eq!(status, SamslrStatus::Ok);
        let short = samslr_model_forward(model, input.as_ptr(), dims.as_ptr(), got.as_mut_ptr(), 5);
        assert_eq!(short, SamslrStatus::BufferTooSmall);
        let bad_dims = [2usize, 3, 10, 26];
        let wrong = samslr_model_forward(model, input.as_ptr(), bad_dims.as_ptr(), got.as_mut_ptr(), got.len());
        assert_eq!(wrong, SamslrStatus::ShapeMismatch);
        samslr_model_free(model);
    }
    assert_eq!(got, want.iter().copied().collect::<Vec<_>>());
}
