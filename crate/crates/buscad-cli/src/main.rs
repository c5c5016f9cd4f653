fn main() {
    println!("buscad");
}
