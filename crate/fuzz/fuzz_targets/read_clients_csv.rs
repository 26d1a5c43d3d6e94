#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else {
        return;
    };
    let n_classes = usize::from(n % 16) + 1;
    if let Ok(clients) = fedgr::datagen::read_clients_csv(rest, n_classes) {
        let mut buf = Vec::new();
        fedgr::datagen::write_clients_csv(&mut buf, &clients).unwrap();
        let back = fedgr::datagen::read_clients_csv(buf.as_slice(), n_classes).unwrap();
        assert_eq!(back, clients);
    }
});
