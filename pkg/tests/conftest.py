import pytest

from youpi.app import Pipeline, PipelineConfig


@pytest.fixture
def make_pipeline(tmp_path):
    """Factory for isolated pipelines; scheduler ticks are driven manually."""
    created = []

    def factory(nodes_text=None, clock=None, **overrides):
        index = len(created)
        nodes_file = None
        if nodes_text is not None:
            nodes_file = tmp_path / f"nodes{index}.txt"
            nodes_file.write_text(nodes_text)
        config = PipelineConfig(
            db_path=str(tmp_path / f"youpi{index}.db"),
            data_dir=str(tmp_path / f"data{index}"),
            notify_sink=str(tmp_path / f"notify{index}.log"),
            admin_password="adminpw",
            nodes_file=str(nodes_file) if nodes_file else None,
            **overrides,
        )
        kwargs = {"clock": clock} if clock else {}
        pipeline = Pipeline(config, **kwargs)
        created.append(pipeline)
        return pipeline

    yield factory
    for pipeline in created:
        pipeline.close()


@pytest.fixture
def pipeline(make_pipeline):
    return make_pipeline()


@pytest.fixture
def admin(pipeline):
    return pipeline.accounts.find_by_login("admin")


@pytest.fixture
def alice(pipeline):
    return pipeline.accounts.create_user("alice", "alicepw")


@pytest.fixture
def bob(pipeline):
    return pipeline.accounts.create_user("bob", "bobpw")
