fn main() {
    confclust::cli::main();
}
