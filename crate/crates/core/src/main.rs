use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TL_LOG", "warn")).init();
    let code = tgloop::cli::main_with_args(std::env::args_os());
    ExitCode::from(code as u8)
}
