fn main() -> std::process::ExitCode {
    litforge::cli::main()
}
