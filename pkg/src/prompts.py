"""Prompt templates for agents, analyzers and reflection operators."""

DEFAULT_AGENT_TOOLS = [
    "send_message",
    "list_pool",
    "start_agent",
    "stop_agent",
    "finalize",
    "terminate",
    "load_skill",
]

ORCHESTRATION_GUIDE = """You work inside an open-roster team. Only some teammates are active; the rest wait in the pool.

- list_pool() shows every pool agent, its role and whether it is active.
- start_agent(name, brief) recruits a pool agent; the brief becomes its first message.
- stop_agent(name) releases an active agent once its part is done.
- send_message(recipient, body) delivers a message to one teammate's mailbox. There is no broadcast.
- load_skill(name) returns the full instructions of one of your skills.
- finalize(deliverable) submits the team's final deliverable and ends the episode for everyone.
- terminate(reason) aborts the episode without a deliverable. Use it only when the task cannot be done.

When you have nothing to do, reply without calling tools; you will wake up when a message arrives."""

SKILL_INDEX_PREAMBLE = "Only names and descriptions are listed. Call load_skill(name) for the full body."

NEW_AGENT_ROLE = """# {name}

You are {name}. {role}
"""

TASK_BRIEF = """New task ({task_id}):

{task}
{attachments}
Current pool:
{roster}"""

FORCE_FINALIZE = """The episode budget is exhausted ({reason}). Tools are disabled.
Reply now with your best-effort final deliverable for the task, as plain text."""

# Attribution

ATTRIBUTION_GLOBAL = """You are auditing a failed multi-agent run. Below is the full trace, one record per step.
Identify the agent and the step whose mistake decided the failure.

{trace}

Respond with JSON only: {{"agent": "<agent name>", "step": <step number>, "reason": "<one sentence>"}}"""

ATTRIBUTION_REPAIR = """Your previous answer could not be parsed:

{previous}

Respond again with JSON only, using exactly these keys: {keys}."""

ATTRIBUTION_LOCAL = """You are {agent}. The team failed its task. Below is your own part of the run,
numbered from 1 in the order you experienced it.

{trace}

Audit your own steps. Did one of your steps cause the failure?
Respond with JSON only: {{"i_erred": true|false, "my_step": <your step number or null>, "confidence": <0..1>}}"""

ATTRIBUTION_SUMMARY = """You are {agent}. The team failed its task. Below is your own part of the run,
numbered from 1 in the order you experienced it.

{trace}

Post a short summary of your findings for your teammates (what you did, what you received,
what looked wrong), plus your current self-assessment.
Respond with JSON only: {{"summary": "<at most a few sentences>", "i_erred": true|false, "my_step": <number or null>, "confidence": <0..1>}}"""

ATTRIBUTION_REAUDIT = """You are {agent}. Your teammates posted these summaries:

{summaries}

The provisional verdict blames {provisional_agent} at global step {provisional_step}.

Re-audit your own part of the run:

{trace}

Submit your final assessment. Set "disagree" to true only if you dispute the provisional verdict
and can quote counter-evidence from your own steps in "counter_evidence".
Respond with JSON only: {{"summary": "<updated summary>", "i_erred": true|false, "my_step": <number or null>, "confidence": <0..1>, "disagree": true|false, "counter_evidence": "<quote or empty>"}}"""

# Reflection

L1_REFLECTION = """You are {agent} ({role}). The episode has ended.

Task: {task}
Outcome: {outcome}

Your local trace:
{trace}
{evidence}
Reflect on your own behavior. Propose at most {max_patches} short imperative patches for your future
self, optional skills, and a summary for the team (at most {summary_chars} characters: findings,
self-assessment, requests to the team). You may flag step numbers of your trace that the team should see.
{questions_hint}
Respond with JSON only:
{{"questions": [{{"target": "<teammate>", "question": "<text>"}}], "patches": ["<directive>"], "skills": [{{"name": "<slug>", "description": "<one line>", "body": "<full text>"}}], "summary": "<text>", "flagged_steps": [<step numbers>]}}"""

L1_QUESTIONS_HINT = """Before finalizing you may ask up to {max_questions} questions to these teammates: {teammates}.
If you ask questions, leave patches empty; you will get the answers and reflect again."""

EVIDENCE_ANSWER = """You are {agent}. A teammate ({asker}) is reviewing the episode and asks:

{question}

Answer briefly and only from your own part of the run:
{trace}"""

L2_REFLECTION = """Agents {a} and {b} worked together on this task.

Task: {task}
Outcome: {outcome}

Messages they exchanged:
{exchange}

Current profiles: {a} about {b}: {profile_ab}
                  {b} about {a}: {profile_ba}

Revise how each understands, queries and relies on the other.
Respond with JSON only: {{"profiles": {{"{a}": "<{a}'s profile of {b}>", "{b}": "<{b}'s profile of {a}>"}}, "notes": {{"{a}": "<note>", "{b}": "<note>"}}}}
Omit any key you do not want to change."""

L3_REVISION = """You lead the team's retrospective.

Task: {task}
Outcome: {outcome}

Team constitution:
{constitution}

Organization:
{organization}

Pool:
{roster}

Agent summaries:
{summaries}

Selected evidence:
{evidence}

Decide whether the team needs new roles, fewer roles, different coordination rules or a revised
constitution, and whether the task should be retried now with the revised team.
Respond with JSON only:
{{"constitution": "<full new text or null>", "organization": "<full new text or null>", "add_agents": [{{"name": "<slug>", "role": "<one line>"}}], "remove_agents": ["<name>"], "retry": true|false, "rationale": "<text>"}}"""
