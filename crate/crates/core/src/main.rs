use std::process::ExitCode;

fn main() -> ExitCode {
    match tmifpe::cli::run_from_env() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One line, so scripts can parse it.
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
