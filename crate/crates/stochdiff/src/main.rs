fn main() {
    std::process::exit(stochdiff::cli::main());
}
