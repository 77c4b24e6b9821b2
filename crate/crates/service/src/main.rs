fn main() -> std::process::ExitCode {
    virotem_service::cli::main_with(std::env::args_os())
}
