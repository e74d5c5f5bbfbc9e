fn main() -> std::process::ExitCode {
    cotscale::cli::main()
}
