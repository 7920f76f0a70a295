fn main() {
    std::process::exit(mfgkit_cli::main_entry());
}
