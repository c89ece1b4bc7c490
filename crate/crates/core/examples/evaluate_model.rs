//! Full evaluation of a trained model against the held-out verifier:
//! threshold calibration, the four verification rates, reconstruction
//! distances, and multimodality. Writes report.json / report.csv.
//!
//! Usage: evaluate_model [model.ckpt] [verifier.ckpt] [data_dir] [out_dir]

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = std::path::PathBuf::from(
        args.get(1).map(String::as_str).unwrap_or("runs/train/model.ckpt"),
    );
    let verifier = std::path::PathBuf::from(
        args.get(2).map(String::as_str).unwrap_or("runs/pretrain/verifier.ckpt"),
    );
    let data = std::path::PathBuf::from(args.get(3).map(String::as_str).unwrap_or("runs/data"));
    let out = std::path::PathBuf::from(args.get(4).map(String::as_str).unwrap_or("runs/eval"));
    if let Err(e) = facepass::cli::run_evaluate(&model, &verifier, &data, &out, 0, 4) {
        eprintln!("error[{}]: {e}", e.exit_code());
        std::process::exit(e.exit_code());
    }
}
