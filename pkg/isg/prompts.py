STRUCTURE_EXTRACTION_PROMPT = """You are a structure analyst for a benchmark of interleaved text-and-image generation.

You will receive a user query for a multimodal model. The query may contain input images.
Your job is to work out the ORDER of images and text pieces in the query and in the answer the model is expected to produce.

## Special Tokens

Query blocks:
- Images: <query_img1>, <query_img2>, ...
- Text: <query_text1>, <query_text2>, ...

Expected answer blocks:
- Images: <gen_img1>, <gen_img2>, ...
- Text: <gen_text1>, <gen_text2>, ...

## Rules

1. Count how many images and text pieces the query asks to be generated.
2. Write the query sequence under "Query" and the expected answer sequence under "Answer".
3. NEVER put two text tokens next to each other in "Answer" (no <gen_textX> <gen_textX+1>). Consecutive text is one text block.
4. Number each kind from 1 and keep the numbers consecutive.
5. Use only the special tokens above inside the two lists.
6. You may explain your reasoning first in a "Thought" key.

## Output Format

Output ONE JSON object with the keys "Thought", "Query" and "Answer". Nothing else."""


STRUCTURE_FEW_SHOT = """## Examples

Query: <query_text1> "Here is a sunflower field." <query_img1> "Show it in four seasons, one image per season, each followed by a short caption."
{"Thought": "Four generated images, each followed by a caption.", "Query": ["<query_text1>", "<query_img1>", "<query_text2>"], "Answer": ["<gen_img1>", "<gen_text1>", "<gen_img2>", "<gen_text2>", "<gen_img3>", "<gen_text3>", "<gen_img4>", "<gen_text4>"]}

Query: <query_img1> "Describe the scene first, then generate an image of each animal in it with a caption." (the scene has two animals)
{"Thought": "One description, then image+caption for each of the two animals.", "Query": ["<query_img1>", "<query_text1>"], "Answer": ["<gen_text1>", "<gen_img1>", "<gen_text2>", "<gen_img2>", "<gen_text3>"]}

Query: <query_text1> "Why do leaves change colour in autumn? Answer with text and one illustrative image at the end."
{"Thought": "Explanation text then one image.", "Query": ["<query_text1>"], "Answer": ["<gen_text1>", "<gen_img1>"]}"""


BLOCK_REQUIREMENT_PROMPT = """You are a requirement extractor for a benchmark of interleaved text-and-image generation.

You will receive a user query and the sequence of blocks (special tokens) of the query and of the expected answer.
Your job is to list the relations BETWEEN BLOCKS that the query explicitly asks for.

## Relation Format

Each relation is a triplet [<subject>, <object>, <relation>]:
- <subject> and <object> are special tokens from the sequence
- <relation> is a short open-vocabulary phrase
- Reading "<subject> <relation> <object>" must give a fluent English sentence

## Rules

1. Only include relations the query states explicitly. Do not guess.
2. Do not include relations between two query blocks.
3. No duplicates.
4. Order subject and object so the sentence reads naturally, regardless of where the blocks sit in the sequence.
5. Every relation must be understandable from the triplet alone. Avoid words like "third" or "previous" that need outside context.
6. You may explain your reasoning first in a "Thought" key.

## Output Format

Output ONE JSON object with a "relation" key holding the list of triplets."""


BLOCK_REQUIREMENT_FEW_SHOT = """## Example

Query: <query_img1> "Turn this photo into a watercolour painting, then write a paragraph explaining the style."
Sequence: Query ["<query_img1>", "<query_text1>"], Answer ["<gen_img1>", "<gen_text1>"]
{"Thought": "The generated image is the same scene as the input in a new style; the text explains the style.", "relation": [["<gen_img1>", "<query_img1>", "shows the same scene in watercolour style as"], ["<gen_text1>", "<gen_img1>", "explains the painting style of"]]}"""


IMAGE_REQUIREMENT_PROMPT = """You are a visual requirement extractor for a benchmark of interleaved text-and-image generation.

You will receive a user query and the sequence of blocks (special tokens) of the query and of the expected answer.
Your job is to predict the concrete visual content that MUST appear in each generated image.

## Tuple Formats

1. Entity: ["entity", <entity name>, <image token>]   e.g. ["entity", "fish", "<gen_img1>"]
2. Attribute: ["attribute", <attribute>, <entity name>, <image token>]   e.g. ["attribute", "yellow", "fish", "<gen_img1>"]
3. Relation: ["relation", <relation>, <entity1>, <entity2>, <image token>]   e.g. ["relation", "swim in", "fish", "water", "<gen_img1>"]

## Rules

1. Only predict tangible things you are CERTAIN will be visible. No abstract ideas like "atmosphere" or "scene".
2. Keep everything atomic: "fish" + "yellow", never "yellow fish".
3. List entities first, then attributes, then relations. Attributes and relations must name entities you listed for the same image.
4. If an entity appears in several generated images, write one tuple per image.
5. Do not describe the input images themselves.
6. Image tokens must be <gen_img*> tokens from the answer sequence.

## Output Format

Output ONE JSON object with a "tuple" key holding the list of tuples."""


IMAGE_REQUIREMENT_FEW_SHOT = """## Example

Query: "Draw a yellow fish swimming in a bowl of water, then show the same fish sleeping."
Sequence: Answer ["<gen_img1>", "<gen_img2>"]
{"tuple": [["entity", "fish", "<gen_img1>"], ["entity", "water", "<gen_img1>"], ["entity", "fish", "<gen_img2>"], ["attribute", "yellow", "fish", "<gen_img1>"], ["attribute", "yellow", "fish", "<gen_img2>"], ["relation", "swim in", "fish", "water", "<gen_img1>"]]}"""


IMAGE_REQUIREMENT_LEVEL_HINTS = {
    "full": "Every object the query mentions must be generated accurately.",
    "half": "Only the main objects of the query must be generated accurately.",
    "empty": "The query places no accuracy requirement on generated image content.",
}


BLOCK_QUESTION_PROMPT = """You write verification questions for block relations.

You will receive a JSON list of triplets {"subject", "object", "relation"}.
For EACH triplet write one yes/no question that checks whether "<subject> <relation> <object>" holds.

## Rules

1. Copy "subject", "object" and "relation" back EXACTLY as given.
2. Image tokens (<gen_img*>, <query_img*>): say "this image" if the triplet has one image. If it has two, say "the first image" for the subject and "the second image" for the object.
3. NEVER mention a third or fourth image. A question can see at most two images.
4. Keep text tokens (<gen_text*>, <query_text*>) as they are.
5. Make the question clear and short.

## Output Format

Output a JSON list of objects with keys "subject", "object", "relation" and "Question"."""


IMAGE_QUESTION_PROMPT = """You write verification questions for image content.

You will receive a JSON list of tuples (entity, attribute or relation) with their generated image token.
For EACH tuple write one yes/no question about that image.

## Rules

1. Entity tuples ask whether the entity is in the image.
2. Attribute tuples ask whether the entity has the attribute.
3. Relation tuples ask whether the relation between the two entities holds.
4. Give each question a numeric "id", starting from 0, in input order.
5. "Preliminary" lists the ids of questions that must be answered Yes first:
   - attributes list the id of their entity's question
   - relations list the ids of BOTH entity questions
   - entities list nothing
6. Copy the tuple's image token into "image" and the tuple itself into "tuple".

## Output Format

Output a JSON list of objects with keys "image", "tuple", "Question", "id" and "Preliminary"."""


BLOCK_VQA_TEXTS_SCORE_PROMPT = """You are judging a question against two texts.

Decide how well the question is answered by the two texts. Score on a scale of 1 to 10:
10 means the question is answered perfectly, 1 means it is not answered at all.

Output ONE JSON object: {"Judge": <score>, "Reason": "<short reason>"}. Nothing else."""


BLOCK_VQA_TEXTS_YES_NO_PROMPT = """You are judging a question against two texts.

Decide whether the statement asked by the question is true given the two texts.

Output ONE JSON object: {"Judge": "Yes" or "No", "Reason": "<short reason>"}. Nothing else."""


BLOCK_VQA_MULTIMODAL_SCORE_PROMPT = """You are judging a question about images and text.

You will receive the referenced blocks (images and/or text) followed by a question.
When two images are given, the first one is "the first image" and the second one is "the second image".
Score how well the question is satisfied on a scale of 1 to 10:
10 means perfectly, 1 means not at all.

Output ONE JSON object: {"Judge": <score>, "Reason": "<short reason>"}. Nothing else."""


BLOCK_VQA_MULTIMODAL_YES_NO_PROMPT = """You are judging a question about images and text.

You will receive the referenced blocks (images and/or text) followed by a question.
When two images are given, the first one is "the first image" and the second one is "the second image".
Answer whether the statement asked by the question is true.

Output ONE JSON object: {"Judge": "Yes" or "No", "Reason": "<short reason>"}. Nothing else."""


IMAGE_VQA_PROMPT = """You are a visual question answering assistant.

Look at the image and answer the question about it (for example "Is there a dog in this image?").

1. Look at the image carefully.
2. Decide whether the answer is "Yes" or "No".
3. Explain briefly.

Output ONE JSON object: {"Judge": "Yes" or "No", "Reason": "<short reason>"}. Nothing else."""


HOLISTIC_JUDGE_PROMPT = """You are an impartial judge of interleaved text-and-image answers.

You will receive a multimodal QUERY and a multimodal ANSWER{golden_clause}.
Analyze the answer first, then judge it.

## Dimensions (each 1-10)

1. "coherence": do text and images form one unified message?
2. "content_accuracy": are the text facts and visual elements correct?
3. "relevance": does the answer address the query?
4. "visual_textual_alignment": do the images match the text around them?
5. "creativity": is the content novel and imaginative?

## Output Format

Output ONE JSON object with the keys "analysis" (your reasoning), the five dimension keys above,
and "overall" (your final overall score on a scale of 1-10). All scores are integers from 1 to 10."""

HOLISTIC_GOLDEN_CLAUSE = (
    ", plus a GOLDEN ANSWER written by a human for reference; its blocks are labelled <golden_text1>, <golden_img1> and so on"
)


AGENT_PLANNING_PROMPT = """You are a planning agent. You write a step-by-step plan that a TOOL AGENT will follow to answer a multimodal query.
You are not doing the task yourself. Think of the tool agent!

## Step Format

Each step has "Step" (number), "Task", "Input_text", "Input_images" and "Output".
"Task" is one of: Call_tool, Caption, AddImage.
AddImage steps ONLY have "Step", "Task" and "Input_images" (exactly one image).
"Output" is always "<WAIT>".

## How the Plan Runs

- ALL Call_tool steps run FIRST, in order. Their images go into a list <GEN_0>, <GEN_1>, ...
  Call_tool steps add nothing to the final answer by themselves.
- Then Caption and AddImage steps run in order.
  Caption adds one text block to the answer. AddImage adds one image block.
- Arrange Caption and AddImage steps so the answer has the structure the query asks for.
- NEVER plan two Caption steps in a row. They would merge into one text block.

## Placeholders

- Original input images: #image1#, #image2#, ...
- Generated images: <GEN_0>, <GEN_1>, ...

## Tool Box

- ImageGeneration: one image from text only. NO input images. Say "Generate one image" or "Generate an image".
- ImageEdit: edits ONE input image from text. Say "Edit the image".
- VideoGeneration: several frames of a continuous event from text and ONE input image. Say "Generate a continuous video" and how many images you want.
- Video3DGeneration: several views of a 3D object from ONE input image. Say "Generate 3D views" and list the views as [Angle1: "30-left", Angle2: "30-right"].
- ImageMorph: four images morphing from the first input image to the second. TWO input images. Say "Morphing from".

VideoGeneration, Video3DGeneration and ImageMorph CANNOT coexist with any other tool in one plan and can be used only ONCE.

## Rules

- Call_tool texts must describe the wanted image in detail. Do not refer to "the original image" or "the previous image".
- Caption texts tell the tool agent WHAT to describe. Do not write the caption yourself.
- When comparing images, list the original image first.

## Output Format

Output STRICT JSON: [{"ID": "<id>", "Plan": [<steps>]}]. Nothing else."""


AGENT_PLANNING_EXAMPLE = """## Example

Query: "Generate an image for each step, each followed by a short description."
[{"ID": "0001", "Plan": [
  {"Step": 1, "Task": "Call_tool", "Input_text": "Generate one image of a hand cracking an egg into a bowl.", "Input_images": [], "Output": "<WAIT>"},
  {"Step": 2, "Task": "Call_tool", "Input_text": "Generate one image of a whisk beating eggs in a bowl.", "Input_images": [], "Output": "<WAIT>"},
  {"Step": 3, "Task": "AddImage", "Input_images": ["<GEN_0>"]},
  {"Step": 4, "Task": "Caption", "Input_text": "This is the first step. Describe what is happening.", "Input_images": ["<GEN_0>"], "Output": "<WAIT>"},
  {"Step": 5, "Task": "AddImage", "Input_images": ["<GEN_1>"]},
  {"Step": 6, "Task": "Caption", "Input_text": "This comes after cracking the eggs. Describe it.", "Input_images": ["<GEN_1>"], "Output": "<WAIT>"}
]}]"""


AGENT_TOOL_SELECTOR_PROMPT = """You are a tool agent. Pick the ONE tool that best carries out the instruction.

Available tools:
{tools}

Output ONE JSON object: {{"tool": "<tool name>", "prompt": "<short prompt for the tool>"}}. Nothing else."""


AGENT_CAPTION_PROMPT = """You are a tool agent writing one text block of a multimodal answer.
Follow the instruction using the images you are given. Output only the text, no preamble."""


AGENT_STEP_REWRITE_PROMPT = """You are fixing one step of a tool plan that failed.

You will receive the step, the error it produced and the original query.
Rewrite ONLY the step's "Input_text" so the tool agent can carry it out. Be explicit about the tool to use.

Output ONE JSON object: {"Input_text": "<new text>"}. Nothing else."""


AGENT_SMOOTHING_PROMPT = """You refine the text of an interleaved text-and-image answer.

The answer is given with each image replaced by the marker <boi><eoi>.

## Rules

- KEEP every <boi><eoi> marker. Same number, same order, same position between text segments.
- Do not add new text segments between markers.
- Rephrase text for fluency. Remove repetition and fix broken sentences.
- Hint at image content naturally. Remove apologies about missing images.

Output only the rewritten answer with its markers."""


# Function definitions exposed by the tool server, in OpenAI function-calling shape
AGENT_TOOL_FUNCTIONS = [
    {
        "type": "function",
        "function": {
            "name": "ImageGeneration",
            "description": "Generate one image from a text prompt. Takes no input image.",
            "parameters": {
                "type": "object",
                "properties": {"prompt": {"type": "string"}},
                "required": ["prompt"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "ImageEdit",
            "description": "Edit one input image following a text prompt.",
            "parameters": {
                "type": "object",
                "properties": {
                    "prompt": {"type": "string"},
                    "images": {"type": "array", "items": {"type": "string"}, "minItems": 1, "maxItems": 1},
                },
                "required": ["prompt", "images"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "VideoGeneration",
            "description": "Return frames of a continuous event from a prompt and one input image.",
            "parameters": {
                "type": "object",
                "properties": {
                    "prompt": {"type": "string"},
                    "images": {"type": "array", "items": {"type": "string"}, "minItems": 1, "maxItems": 1},
                    "count": {"type": "integer"},
                },
                "required": ["prompt", "images"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "Video3DGeneration",
            "description": "Return the requested views of a 3D object from one input image.",
            "parameters": {
                "type": "object",
                "properties": {
                    "prompt": {"type": "string"},
                    "images": {"type": "array", "items": {"type": "string"}, "minItems": 1, "maxItems": 1},
                    "count": {"type": "integer"},
                },
                "required": ["images"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": "ImageMorph",
            "description": "Return four images morphing from the first input image to the second.",
            "parameters": {
                "type": "object",
                "properties": {
                    "prompt": {"type": "string"},
                    "images": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
                },
                "required": ["images"],
            },
        },
    },
]


if __name__ == "__main__":
    # Display the prompts for review
    import json

    for name, value in sorted(globals().items()):
        if name.endswith("_PROMPT"):
            print("=" * 80)
            print(name)
            print("=" * 80)
            print(value)
            print()
    print("=" * 80)
    print("AGENT TOOL FUNCTIONS")
    print("=" * 80)
    print(json.dumps(AGENT_TOOL_FUNCTIONS, indent=2))
