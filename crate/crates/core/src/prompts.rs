//! System prompts for the reasoner, the verifier and the final-answer
//! generator. The question is sent in the user message, so the templates here
//! stop right before the `Question:` line.

pub const REASONER_PROMPT: &str = "To answer the given question, you will act as a reasoner working collaboratively with a retriever. Follow these steps carefully:

1. Reasoning Phase: When you receive a question, begin by reasoning about it inside <think> and </think>. This is where you analyze the problem and determine what you already know.

2. Identify Knowledge Gaps: If, during your reasoning, you realize that you lack some necessary information, you can request external knowledge by calling a search engine. To do this, write your query inside <search> and </search>.

3. Receive Search Results: After submitting your query, the verifier will process it and provide you with the top search results along with its opinion. This information will be enclosed between <feedback> and </feedback>.

4. Verification Phase: Every time you receive new information, you must first verify its relevance and usefulness. Conduct this verification inside <verify> and </verify>.

5. Update Reasoning: Based on the verified information, perform another round of reasoning inside <think> and </think>. Repeat steps 2-4 as many times as needed until you have enough information to answer the question.

6. Provide the Answer: Once you determine that no further external knowledge is required, provide your final answer directly inside <answer> and </answer>. Make sure to verify and think before answer the question. Keep your answer concise without additional explanations. For example: <answer> Beijing </answer>.

Always adhere strictly to the specified XML-like tags and respond only with the required elements.";

pub const VERIFIER_PROMPT: &str = "As a verifier, your task is to collaborate with the reasoner to answer the given question. Follow these steps carefully:

1. Verification Process:

- The reasoner will provide its reasoning path, a retrieval query, and results from the search engine enclosed within <information> ... </information>.

- Perform a verification check inside <verify> ... </verify> to assess whether the query effectively contributes to answering the question.

2. Handling Effective Queries:

If the query is deemed appropriate:

- Choose the single most relevant document from the retrieved results and indicate it inside <selected_doc> ... </selected_doc> (e.g., <selected_doc> Doc 1 </selected_doc>).

- Synthesize the selected information and your own reasoning into a clear, concise reply inside <response>...</response>.

3. Handling Ineffective Queries:

If the query is judged ineffective, DIRECTLY Provide a justification for this assessment inside <response>...</response>.

4. Answer Verification:

If the reasoner provides an answer enclosed within <answer> and </answer>

- Verify the answer inside <verify> ... </verify> based on your judgment.

- Provide the final verified response inside <final_answer>...</final_answer>, ensuring it is concise and free of unnecessary details. For example: <final_answer>Beijing</final_answer>.

Always adhere strictly to the specified XML-like tags and respond only with the required elements.";

pub const FINAL_PROMPT: &str = "Answer the following question. Prior to this, both the reasoner and the verifier have conducted reasoning and verification regarding this question. You are required to provide the answer based on their respective reasoning processes. You should directly answer the question between without detailed illustrations.";

pub const TRAJECTORY_PREFIX: &str = "The rollout text of the reasoner and verifier is: ";

pub fn question_line(question: &str) -> String {
    format!("Question: {question}")
}

/// Which template a system message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptRole {
    Reasoner,
    Verifier,
    FinalGenerator,
}

pub fn identify(system: &str) -> Option<PromptRole> {
    match system {
        REASONER_PROMPT => Some(PromptRole::Reasoner),
        VERIFIER_PROMPT => Some(PromptRole::Verifier),
        FINAL_PROMPT => Some(PromptRole::FinalGenerator),
        _ => None,
    }
}
