fn main() -> std::process::ExitCode {
    syco::cli::main_entry()
}
