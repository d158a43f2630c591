from liqforecast.synthetic import demo_files, demo_path


def test_bundled_demo_is_current():
    files = demo_files()
    root = demo_path()
    for rel, text in files.items():
        assert (root / rel).read_text() == text, rel
    on_disk = {str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()}
    assert on_disk == set(files)


def test_generation_deterministic():
    assert demo_files(3) == demo_files(3)
    assert demo_files(3)["rasters/lpi_A.asc"] != demo_files(4)["rasters/lpi_A.asc"]
