fn main() -> std::process::ExitCode {
    art_head::cli::main()
}
