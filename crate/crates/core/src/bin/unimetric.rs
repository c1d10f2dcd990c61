fn main() -> std::process::ExitCode {
    unimetric::cli::main()
}
