import asyncio

import pytest

from isg.agent.executor import ExecutionMemo, bind_tools, execute_best_effort, execute_plan
from isg.agent.plan import ViolationKind, parse_plan
from isg.agent.refiner import Refiner
from isg.agent.tools import TOOL_BOX, MockToolClient, ToolSpec, read_stamp
from isg.content import InterleavedSequence, structure_signature
from isg.errors import CaptionFailure, ToolFailure

from tests.conftest import png_ref, scripted_gateway
from tests.test_plan import add, caption, tool

QUERY = InterleavedSequence.of(png_ref(1), "Show this kettle boiling, step by step.")


def captioner(reply: str = "The water starts to steam."):
    return scripted_gateway(rules=[{"purpose": "agent.caption", "response": reply}])


def test_tool_steps_run_before_assembly():
    plan = parse_plan(
        [
            tool(1, "Generate one image of a cold kettle."),
            add(2, "<GEN_1>"),
            caption(3, "Describe the hot kettle.", "<GEN_1>"),
            tool(4, "Generate one image of a hot kettle."),
            add(5, "<GEN_0>"),
        ]
    )
    client = MockToolClient()
    answer = asyncio.run(execute_plan(plan, QUERY, client, captioner()))

    assert str(structure_signature(answer)) == "I,T,I"
    assert client.calls == [(1, "ImageGeneration"), (4, "ImageGeneration")]
    assert read_stamp(answer.images[0])["isg-step"] == "4"
    assert read_stamp(answer.images[1])["isg-step"] == "1"
    assert answer.texts == ["The water starts to steam."]


def test_original_images_pass_through():
    plan = parse_plan([add(1, "#image1#"), caption(2, "Describe the kettle.", "#image1#")])
    answer = asyncio.run(execute_plan(plan, QUERY, MockToolClient(), captioner()))
    assert answer.images[0] == QUERY.images[0]


def test_multi_output_tools_fill_consecutive_slots():
    plan = parse_plan(
        [
            tool(1, "Generate a continuous video of the kettle boiling in 3 frames.", "#image1#"),
            add(2, "<GEN_0>"),
            add(3, "<GEN_2>"),
        ]
    )
    answer = asyncio.run(execute_plan(plan, QUERY, MockToolClient(), captioner()))
    assert [read_stamp(image)["isg-index"] for image in answer.images] == ["0", "2"]


def test_view_count_follows_angle_entries():
    views = tool(1, "Generate 3D views of the kettle. Angle1: front. Angle2: left.", "#image1#")
    answer = asyncio.run(execute_plan(parse_plan([views, add(2, "<GEN_1>")]), QUERY, MockToolClient(), captioner()))
    assert read_stamp(answer.images[0]) == {"isg-tool": "Video3DGeneration", "isg-step": "1", "isg-index": "1"}

    beyond = parse_plan([views, add(2, "<GEN_2>")])
    with pytest.raises(CaptionFailure):
        asyncio.run(execute_plan(beyond, QUERY, MockToolClient(), captioner()))


def test_failed_tool_call_raises_tool_failure():
    plan = parse_plan([tool(1, "Generate one image of a kettle."), add(2, "<GEN_0>")])
    with pytest.raises(ToolFailure) as info:
        asyncio.run(execute_plan(plan, QUERY, MockToolClient(failures={1: 1}), captioner()))
    assert info.value.step == 1


def test_unmatched_instruction_raises_tool_failure():
    plan = parse_plan([tool(1, "Paint a kettle."), add(2, "<GEN_0>")])
    with pytest.raises(ToolFailure):
        asyncio.run(execute_plan(plan, QUERY, MockToolClient(), captioner()))


def test_empty_caption_raises_caption_failure():
    plan = parse_plan([add(1, "#image1#"), caption(2, "Describe the kettle.")])
    with pytest.raises(CaptionFailure) as info:
        asyncio.run(execute_plan(plan, QUERY, MockToolClient(), captioner("   ")))
    assert info.value.step == 2


SKETCH = ToolSpec(name="SketchGeneration", image_arity=0, keywords=("generate one image",), description="a pencil sketch")


def test_selector_breaks_ties_between_matching_tools():
    tools = [*TOOL_BOX, SKETCH]
    gateway = scripted_gateway(
        rules=[
            {"purpose": "agent.select", "response": 'I pick {"tool": "SketchGeneration"}'},
            {"purpose": "agent.caption", "response": "A sketch."},
        ]
    )
    client = MockToolClient()
    plan = parse_plan([tool(1, "Generate one image of a kettle as a sketch."), add(2, "<GEN_0>")])
    asyncio.run(execute_plan(plan, QUERY, client, gateway, tools=tools))
    assert client.calls == [(1, "SketchGeneration")]
    assert gateway.backend.count("agent.select") == 1


def test_selector_must_name_a_candidate():
    gateway = scripted_gateway(rules=[{"purpose": "agent.select", "response": {"tool": "ImageEdit"}}])
    plan = parse_plan([tool(1, "Generate one image of a kettle."), add(2, "<GEN_0>")])
    with pytest.raises(ToolFailure):
        asyncio.run(execute_plan(plan, QUERY, MockToolClient(), gateway, tools=[*TOOL_BOX, SKETCH]))


def test_plan_is_checked_against_the_selected_tool_before_running():
    poster = ToolSpec(name="ClipPoster", image_arity=1, keywords=("generate a continuous video",), description="one poster frame")
    tools = [*TOOL_BOX, poster]
    gateway = scripted_gateway(rules=[{"purpose": "agent.select", "response": {"tool": "ClipPoster"}}])
    plan = parse_plan([tool(1, "Generate a continuous video of the kettle in 3 frames.", "#image1#"), add(2, "<GEN_2>")])

    bound = asyncio.run(bind_tools(plan, tools, gateway))
    assert bound.steps[0].tool == "ClipPoster"

    client = MockToolClient()
    outcome = asyncio.run(Refiner(gateway, client, tools).attempt(plan, QUERY))
    assert [(v.kind, v.step) for v in outcome] == [(ViolationKind.DANGLING_PLACEHOLDER, 2)]
    assert client.calls == []
    assert gateway.backend.count("agent.select") == 1


def test_memo_skips_repeated_steps():
    plan = parse_plan([tool(1, "Generate one image of a kettle."), add(2, "<GEN_0>"), caption(3, "Describe it.", "<GEN_0>")])
    client = MockToolClient()
    gateway = captioner()
    memo = ExecutionMemo()
    first = asyncio.run(execute_plan(plan, QUERY, client, gateway, memo=memo))
    second = asyncio.run(execute_plan(plan, QUERY, client, gateway, memo=memo))
    assert first == second
    assert len(client.calls) == 1
    assert gateway.backend.count("agent.caption") == 1


def test_best_effort_skips_failed_steps_and_keeps_indices():
    plan = parse_plan(
        [
            tool(1, "Generate one image of a cold kettle."),
            tool(2, "Generate one image of a hot kettle."),
            add(3, "<GEN_0>"),
            caption(4, "Describe the hot kettle.", "<GEN_1>"),
            add(5, "<GEN_1>"),
        ]
    )
    report = asyncio.run(execute_best_effort(plan, QUERY, MockToolClient(failures={1: 5}), captioner()))
    assert str(structure_signature(report.answer)) == "T,I"
    assert read_stamp(report.answer.images[0])["isg-step"] == "2"
    assert len(report.generated) == 1
    assert [s.split(":")[0] for s in report.skipped] == ["Step 1", "Step 3"]
