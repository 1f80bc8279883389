use std::io::stdout;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = misdetect::cli::run(std::env::args_os(), &mut stdout().lock());
    ExitCode::from(code as u8)
}
