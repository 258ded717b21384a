#pragma once

// Prompt templates sent to the reasoner and the vision interpreter. Placeholders
// in angle brackets are substituted by render_prompt().

#include <string_view>

namespace dx::templates {

inline constexpr std::string_view kInterpreterGeneral = R"PROMPT(<Background information>
Given the background information, please analyze the Regions of Interest (RoIs) extracted from the same slide. Perform a comprehensive analysis of the major morphological features of the lesions depicted in these images. Please do not analyze each image individually, but instead focus on an overall evaluation of the tissue. Ignore any watermarks, text, or markings within the images, and focus solely on the tissue and cellular morphology. Please structure your output as follows:

1. Overall Tissue Structure Description:
- Describe the general arrangement, morphology, and distribution of the tissue.
- Identify any structural disorganization, tumor-like clusters, necrotic areas, inflammatory regions, etc.

2. Cellular Morphological Features:
- Describe the size and shape of cells.
- Examine nuclear-to-cytoplasmic ratio, nuclear size, chromatin distribution, nucleoli, mitotic figures, etc.
- Identify any signs of atypia, proliferative activity, etc.
- Identify any special cell types (e.g., lymphocytes, neutrophils, plasma cells, macrophages, foreign-body giant cells, multinucleated cells, etc.) and briefly describe their quantity and distribution.
- Describe any distinct cellular patterns or distributions, such as papillary pattern, glandular pattern and so on.

3. Special Structures or Pathological Changes:
- Mention any specific histological features, such as mitotic figures, inclusion bodies, or extracellular deposits.
- Identify and describe any pathological changes, such as the presence of tumors, calcification, necrosis, inflammation, invasion, or infections.)PROMPT";

inline constexpr std::string_view kInterpreterIcl = R"PROMPT(Determine if Image A and Image B represent the same tissue or abnormality types. Please answer \"Yes\" or \"No\". \nAnswer the question using a single word or phrase. )PROMPT";

inline constexpr std::string_view kReasonerSystem = R"PROMPT(You are Qwen, created by Alibaba Cloud. You are a helpful assistant. A conversation between User and Assistant. The user asks a question, and the Assistant solves it. The assistant first drafts the reasoning process (inner monologue) until it has derived the final answer with full confidence. It then provides a self-contained summary of the thoughts, i.e., keeping succinct but containing all the critical steps needed to reach the conclusion. It should use Markdown and Latex to format the response. Write both the thoughts and summary in the same language as the task posed by the user.\n\n The thinking process must follow the template below (You should **include and only include one** pair of <think></think> and <answer></answer> tags in your response): \n<think>\n The thoughts or/and draft, like working through an exercise on scratch paper. Be as casual and as long as necessary until it is confident to generate a correct answer.\n</think>\n\n<answer>\n Here, provide a concise summary that reflects the reasoning process and presents a clear final answer to the user.\n</answer>\n)PROMPT";

inline constexpr std::string_view kExploratoryUser = R"PROMPT(I need you to act as a professional pathologist. After carefully considering the given information, infer the possible differential diagnoses. Then, based on these differential diagnoses, suggest additional information that needs to be provided to rule out certain possibilities. Specifically:  
1. First, you need to carefully analyze the given information, which mainly includes case background information, previous examination items, morphological descriptions of pathological sections, etc. Summarize the evidence points related to the diagnosis from this information. 
2. Based on the given information, analyze what the possible differential diagnoses are and determine whether they are consistent with the given information. Note: These differential diagnoses should be as broad and accurate as possible (broad means considering less common diagnostic possibilities, and accurate means the listed differential diagnoses should not conflict with most of the background information).  
3. According to the listed differential diagnoses, propose the further examination items. You need to specify the exact antigen-antibody, staining type, or molecular type. If the existing information is sufficient to confirm a specific disease, only output that disease and leave the additional examination items blank.  
4. Particularly, when the diagnosis involves renal cell carcinoma, you can call the relevant tools to further observe the original images and collect evidence. The tools include: renal clear cell observation tool (tool-ccRCC), renal chromophobe cell observation tool (tool-chRCC), renal papillary cell observation tool (tool-pRCC), and Furhman nuclear grade observation tool (tool-Nuclear). When the diagnosis involves prostate adenocarcinoma, you can call the tool (tool-Gleason) to evaluate the Gleason score. When necessary, you can call the invasion detection tool (tool-invasion) to detect any lymphovascular or perineural invasion. 
5. Finally, summarize the possible differential diagnoses and the required additional examination items in a given format. When summarizing the differential diagnoses, you need to rank the more likely diagnoses higher.
6. When the given information is sufficient to confirm a specific disease, you can directly output the diagnosis result and skip the differential diagnosis analysis. In the format of the differential diagnosis analysis, only keep the final diagnosis and leave other items blank.
7. When outputting, you need to structure your response and strictly follow the format requirements: 
Differential Diagnoses: \DiffList{Diagnosis 1, Diagnosis 2, ...}
Further Examination Items: \ExamList{Item 1, Item 2, ...}
Further Observation Tool Calls: \ToolCallList{Tool 1, Tool 2, ...}

The following is the case information:
<Case Information>)PROMPT";

inline constexpr std::string_view kDefinitiveUser = R"PROMPT(Now the results of the further examinations have come out. I need you to:
1. First, check the "Case Information" and the first-round diagnosis to sort out the previous diagnostic chain of thought and related conclusions.
2. Then, check the "Results of Further Examinations" and the "Results of Further Observations". The additional test results may not fully match the items requested in the initial diagnosis. Based on the available test results, you need to conduct further differential analysis, and give the final diagnosis. The results of further observations are the results obtained after the first-round tool call. Note: You are completely entitled to overturn the initial diagnostic approach and provide a diagnosis based on the current information after obtaining more data.
3. The final diagnosis must be output in the specified format, i.e., \boxed{Diagnosis Name}
4. If you are still unable to determine a specific disease at this time, continue to output possible diseases (as concise as possible). Format: \DiffList{Diagnosis1, Diagnosis2}

Here is the information:
Results of Further Examinations: <Exam Results>
Results of Further Observations: <Further Observations>)PROMPT";

}  // namespace dx::templates
