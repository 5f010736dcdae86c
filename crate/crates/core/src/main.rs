use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPLITSIM_LOG", "warn")).init();
    let code = splitsim::cli::run_from(std::env::args_os(), &mut std::io::stdout().lock());
    ExitCode::from(code as u8)
}
