use std::process::ExitCode;

fn main() -> ExitCode {
    match akd_lab::commands::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("akd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
