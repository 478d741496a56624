fn main() {
    std::process::exit(gatspoof::cli::main_entry());
}
