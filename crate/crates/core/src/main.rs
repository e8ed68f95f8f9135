fn main() {
    std::process::exit(vardecomp::cli::run());
}
