fn main() {
    std::process::exit(wastesort_service::cli::main());
}
