use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    match incsql::cli::run(std::env::args_os(), &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("incsql: {e}");
            ExitCode::FAILURE
        }
    }
}
