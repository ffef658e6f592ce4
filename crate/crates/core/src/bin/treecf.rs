fn main() {
    std::process::exit(treecf::cli::run(std::env::args_os()));
}
