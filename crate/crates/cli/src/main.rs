use std::process::ExitCode;

fn main() -> ExitCode {
    if let Err(e) = iptt_cli::init_workers().and_then(|_| iptt_cli::run(std::env::args_os())) {
        if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
            clap_err.exit();
        }
        let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
        eprintln!("{}", serde_json::json!({ "error": chain.join(": ") }));
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
