import itertools

import pytest

from youpi import errors
from youpi.authz import (
    Accounts,
    Action,
    Ownership,
    PermissionMode,
    UserAccount,
    change_mode,
    change_owner_group,
    check_access,
    hash_password,
    verify_password,
)


def mode_string_from_bits(bits: int) -> str:
    """Independent renderer: bit 5..0 = owner_r, owner_w, group_r, group_w, other_r, other_w."""
    flags = [(bits >> shift) & 1 for shift in range(5, -1, -1)]
    chars = []
    for i, flag in enumerate(flags):
        chars.append(("r" if i % 2 == 0 else "w") if flag else "-")
    return f"{chars[0]}{chars[1]}|{chars[2]}{chars[3]}|{chars[4]}{chars[5]}"


def oracle_allows(bits: int, relation: str, action: Action) -> bool:
    """Brute-force Unix truth table, written independently of check_access."""
    offset = {"owner": 5, "group": 3, "other": 1}[relation]
    if action is Action.READ:
        return bool((bits >> offset) & 1)
    return bool((bits >> (offset - 1)) & 1)


OWNER = UserAccount(user_id="u-owner", login="owner", password_hash="", groups={"g-team"})
GROUP_MEMBER = UserAccount(user_id="u-member", login="member", password_hash="", groups={"g-team"})
OUTSIDER = UserAccount(user_id="u-out", login="out", password_hash="", groups={"g-else"})
ADMIN = UserAccount(user_id="u-admin", login="root", password_hash="", groups=set(), is_admin=True)

RELATIONS = [("owner", OWNER), ("group", GROUP_MEMBER), ("other", OUTSIDER)]


def obj_with_mode(mode_str: str) -> Ownership:
    return Ownership(owner="u-owner", group="g-team", mode=PermissionMode.from_string(mode_str))


def test_permission_truth_table_384_cases():
    mismatches = []
    for bits, (relation, user), action in itertools.product(
        range(64), RELATIONS, (Action.READ, Action.WRITE)
    ):
        obj = obj_with_mode(mode_string_from_bits(bits))
        got = check_access(user, obj, action)
        want = oracle_allows(bits, relation, action)
        if got != want:
            mismatches.append((bits, relation, action))
    assert mismatches == []


def test_owner_clause_shadows_group_and_other():
    # the one deliberately non-monotone case in the Unix model
    obj = obj_with_mode("--|rw|rw")
    assert check_access(OWNER, obj, Action.READ) is False
    assert check_access(GROUP_MEMBER, obj, Action.READ) is True
    assert check_access(OUTSIDER, obj, Action.READ) is True


def test_monotonicity_for_non_owner_relations():
    for bits in range(64):
        for extra in range(6):
            richer = bits | (1 << extra)
            for relation, user in RELATIONS[1:]:  # group, other
                for action in (Action.READ, Action.WRITE):
                    before = check_access(user, obj_with_mode(mode_string_from_bits(bits)), action)
                    after = check_access(user, obj_with_mode(mode_string_from_bits(richer)), action)
                    assert not (before and not after)


def test_admin_always_allowed():
    obj = obj_with_mode("--|--|--")
    assert check_access(ADMIN, obj, Action.READ)
    assert check_access(ADMIN, obj, Action.WRITE)


def test_mode_string_round_trip():
    for bits in range(64):
        text = mode_string_from_bits(bits)
        assert PermissionMode.from_string(text).to_string() == text


def test_simple_examples():
    assert check_access(OWNER, obj_with_mode("rw|--|--"), Action.WRITE) is True
    assert check_access(OUTSIDER, obj_with_mode("rw|rw|--"), Action.READ) is False


def test_password_hash_round_trip():
    stored = hash_password("s3cret")
    assert verify_password("s3cret", stored)
    assert not verify_password("wrong", stored)
    assert stored != hash_password("s3cret")  # fresh salt each time


class TestAccounts:
    def test_create_user_has_personal_group(self, pipeline):
        accounts = pipeline.accounts
        user = accounts.create_user("carol", "pw")
        assert user.groups  # at least the personal group
        assert accounts.group_id_for("carol") in user.groups

    def test_duplicate_login_rejected(self, pipeline):
        pipeline.accounts.create_user("dave", "pw")
        with pytest.raises(errors.DuplicateName):
            pipeline.accounts.create_user("dave", "pw2")

    def test_authenticate(self, pipeline):
        pipeline.accounts.create_user("erin", "pw")
        assert pipeline.accounts.authenticate("erin", "pw").login == "erin"
        with pytest.raises(errors.InvalidCredentials):
            pipeline.accounts.authenticate("erin", "nope")
        with pytest.raises(errors.InvalidCredentials):
            pipeline.accounts.authenticate("ghost", "pw")


class TestOwnershipMutation:
    @pytest.fixture
    def selection(self, pipeline, alice, tmp_path):
        from helpers import write_fits_dir
        from youpi.instruments import get_profile

        data = tmp_path / "authz-data"
        write_fits_dir(data, 1)
        pipeline.ingestor.run_ingestion([str(data)], get_profile("MEGACAM"), alice)
        from youpi.catalog import Query

        images = pipeline.catalog.query_images(Query(), alice)
        return pipeline.catalog.save_selection("alice-sel", [images[0].image_id], alice)

    def test_owner_opens_group_read(self, pipeline, alice, bob, selection):
        pipeline.accounts.add_to_group(bob.user_id, "alice")
        bob = pipeline.accounts.get_user(bob.user_id)
        # default mode already grants group read; drop it first, then restore
        change_mode(pipeline.db, alice, "selection", selection.selection_id,
                    PermissionMode.from_string("rw|--|--"))
        refreshed = pipeline.catalog.get_selection(selection.selection_id)
        assert check_access(bob, refreshed, Action.READ) is False
        change_mode(pipeline.db, alice, "selection", selection.selection_id,
                    PermissionMode.from_string("rw|r-|--"))
        refreshed = pipeline.catalog.get_selection(selection.selection_id)
        assert check_access(bob, refreshed, Action.READ) is True

    def test_non_owner_cannot_chmod(self, pipeline, bob, selection):
        with pytest.raises(errors.PermissionDenied):
            change_mode(pipeline.db, bob, "selection", selection.selection_id,
                        PermissionMode.from_string("rw|rw|rw"))

    def test_admin_can_chmod_anything(self, pipeline, admin, selection):
        updated = change_mode(pipeline.db, admin, "selection", selection.selection_id,
                              PermissionMode.from_string("rw|rw|r-"))
        assert updated.mode.to_string() == "rw|rw|r-"

    def test_chown_requires_admin(self, pipeline, alice, bob, selection):
        with pytest.raises(errors.PermissionDenied):
            change_owner_group(pipeline.db, pipeline.accounts, alice, "selection",
                               selection.selection_id, new_owner=bob.user_id)

    def test_chown_transfers_owner_clause(self, pipeline, admin, alice, bob, selection):
        change_mode(pipeline.db, alice, "selection", selection.selection_id,
                    PermissionMode.from_string("rw|--|--"))
        before = pipeline.catalog.get_selection(selection.selection_id)
        assert check_access(bob, before, Action.WRITE) is False
        change_owner_group(pipeline.db, pipeline.accounts, admin, "selection",
                           selection.selection_id, new_owner=bob.user_id)
        after = pipeline.catalog.get_selection(selection.selection_id)
        assert after.mode.to_string() == "rw|--|--"  # mode untouched
        assert check_access(bob, after, Action.WRITE) is True
        assert check_access(alice, after, Action.WRITE) is False

    def test_chown_group_only_changes_group_clause(self, pipeline, admin, alice, bob, selection):
        team = pipeline.accounts.ensure_group("team-x")
        pipeline.accounts.add_to_group(bob.user_id, "team-x")
        bob = pipeline.accounts.get_user(bob.user_id)
        before = pipeline.catalog.get_selection(selection.selection_id)
        assert check_access(bob, before, Action.READ) is False
        change_owner_group(pipeline.db, pipeline.accounts, admin, "selection",
                           selection.selection_id, new_group=team)
        after = pipeline.catalog.get_selection(selection.selection_id)
        assert check_access(bob, after, Action.READ) is True  # group-read default

    def test_chown_unknown_user(self, pipeline, admin, selection):
        with pytest.raises(errors.UnknownUser):
            change_owner_group(pipeline.db, pipeline.accounts, admin, "selection",
                               selection.selection_id, new_owner="nobody")
