fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = ttgen::harness::cli::run(std::env::args_os());
    std::process::ExitCode::from(code.clamp(0, 255) as u8)
}
