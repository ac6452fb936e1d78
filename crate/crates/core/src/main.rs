use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(maskbench::expcli::run(std::env::args_os()) as u8)
}
