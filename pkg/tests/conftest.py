import pytest

from sitenet.data import SiteSpec, generate_site, load_manifest, write_manifest


@pytest.fixture(scope="session")
def two_site_dir(tmp_path_factory):
    """A tiny rendered two-site dataset (8 per class per site)."""
    root = tmp_path_factory.mktemp("twosite")
    specs = [
        (11, SiteSpec(background_texture_seed=101)),
        (22, SiteSpec(contrast_scale=1.5, brightness_offset=0.3,
                      background_texture_seed=202)),
    ]
    rows = []
    for site, (seed, spec) in enumerate(specs):
        rows += generate_site(spec, 8, seed, root, site_id=site,
                              write_manifest_file=False)
    write_manifest(root / "manifest.csv", rows)
    return root


@pytest.fixture(scope="session")
def two_site_datasets(two_site_dir):
    ds = load_manifest(two_site_dir / "manifest.csv", input_size=(32, 32))
    return ds.split_by_site()
