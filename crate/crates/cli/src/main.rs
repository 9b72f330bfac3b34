use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = brain_diffae_cli::run(std::env::args_os());
    if result.exit_code == 0 {
        print!("{}", result.summary);
    } else {
        eprint!("{}", result.summary);
        if !result.summary.ends_with('\n') {
            eprintln!();
        }
    }
    ExitCode::from(result.exit_code as u8)
}
